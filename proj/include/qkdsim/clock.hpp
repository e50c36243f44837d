#pragma once

#include <chrono>
#include <functional>
#include <thread>
#include <utility>

namespace qkdsim {

/// Time source shared by every component. Seconds since the start of the run.
class Clock {
public:
    virtual ~Clock() = default;
    virtual double now() const = 0;
    virtual void sleep_until(double t) = 0;
    void sleep_for(double dt) { sleep_until(now() + dt); }
};

/// Simulated clock. Sleeping jumps time forward; the advance hook lets the
/// simulation catch the physical world up before the sleeper resumes.
class SimClock final : public Clock {
public:
    double now() const override { return now_; }

    void sleep_until(double t) override {
        if (t <= now_) return;
        now_ = t;
        if (on_advance_) on_advance_(now_);
    }

    void set_advance_hook(std::function<void(double)> hook) { on_advance_ = std::move(hook); }

private:
    double now_ = 0.0;
    std::function<void(double)> on_advance_;
};

// Real time, for components running as live services.
class WallClock final : public Clock {
public:
    WallClock() : epoch_(std::chrono::steady_clock::now()) {}

    double now() const override {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_).count();
    }

    void sleep_until(double t) override {
        std::this_thread::sleep_until(epoch_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                                   std::chrono::duration<double>(t)));
    }

private:
    std::chrono::steady_clock::time_point epoch_;
};

} // namespace qkdsim
