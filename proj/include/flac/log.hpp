#pragma once

#include <atomic>
#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

namespace flac {

using WarningSink = std::function<void(const std::string&)>;

namespace detail {

struct WarningState {
    std::mutex mutex;
    WarningSink sink;
    std::atomic<std::size_t> count{0};
};

inline WarningState& warning_state() {
    static WarningState state;
    return state;
}

}  // namespace detail

// Routes warnings to `sink` (stderr when empty). Returns the previous sink.
inline WarningSink set_warning_sink(WarningSink sink) {
    auto& st = detail::warning_state();
    std::lock_guard lock(st.mutex);
    return std::exchange(st.sink, std::move(sink));
}

inline std::size_t warning_count() { return detail::warning_state().count.load(); }

inline void warn(const std::string& message) {
    auto& st = detail::warning_state();
    ++st.count;
    std::lock_guard lock(st.mutex);
    if (st.sink) {
        st.sink(message);
    } else {
        std::cerr << "[flac] warning: " << message << '\n';
    }
}

// Collects warnings for the lifetime of the object; restores the prior sink.
class ScopedWarningCapture {
public:
    ScopedWarningCapture()
        : previous_(set_warning_sink([this](const std::string& m) { messages_.push_back(m); })) {}
    ~ScopedWarningCapture() { set_warning_sink(std::move(previous_)); }
    ScopedWarningCapture(const ScopedWarningCapture&) = delete;
    ScopedWarningCapture& operator=(const ScopedWarningCapture&) = delete;

    const std::vector<std::string>& messages() const { return messages_; }

private:
    std::vector<std::string> messages_;
    WarningSink previous_;
};

}  // namespace flac
