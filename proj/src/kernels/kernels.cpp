#include "meow/kernels.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

#include "kernel_table.hpp"
#include "meow/error.hpp"

namespace meow::kernels {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

namespace {

const KernelTable* pick_default() {
    return cpu_has_avx2() ? &avx2_table() : &scalar_table();
}

std::atomic<const KernelTable*> g_table{nullptr};
std::atomic<Backend> g_backend{Backend::scalar};

const KernelTable& table() {
    const KernelTable* t = g_table.load(std::memory_order_acquire);
    if (!t) {
        t = pick_default();
        g_table.store(t, std::memory_order_release);
        g_backend.store(t == &scalar_table() ? Backend::scalar : Backend::avx2,
                        std::memory_order_release);
    }
    return *t;
}

// Minimal persistent pool. Each job is split into one contiguous chunk per
// participant (worker i takes chunk i, the calling thread takes the last), so
// chunk boundaries depend only on n and the participant count and no chunk can
// leak across jobs. run() returns only after every chunk has completed.
class Pool {
public:
    Pool() : requested_(default_threads()) {}

    ~Pool() { stop(); }

    size_t threads() const { return requested_; }

    void set_threads(size_t n) {
        stop();
        requested_ = n == 0 ? 1 : n;
    }

    void run(size_t n, const std::function<void(size_t, size_t)>& fn) {
        if (n == 0) return;
        const size_t participants = std::min(requested_, n);
        if (participants <= 1) {
            fn(0, n);
            return;
        }
        ensure_started(participants - 1);

        std::unique_lock<std::mutex> lock(mutex_);
        job_fn_ = &fn;
        job_n_ = n;
        job_chunks_ = participants;
        pending_ = participants - 1;  // workers' chunks; the caller runs its own
        ++generation_;
        cv_.notify_all();
        lock.unlock();

        run_chunk(participants - 1, n, participants, fn);

        lock.lock();
        done_cv_.wait(lock, [&] { return pending_ == 0; });
        job_fn_ = nullptr;
    }

private:
    static size_t default_threads() {
        const unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1 : hw;
    }

    static void run_chunk(size_t chunk, size_t n, size_t chunks,
                          const std::function<void(size_t, size_t)>& fn) {
        const size_t begin = chunk * n / chunks;
        const size_t end = (chunk + 1) * n / chunks;
        if (begin < end) fn(begin, end);
    }

    void ensure_started(size_t workers) {
        std::lock_guard<std::mutex> lk(mutex_);
        while (workers_.size() < workers) {
            const size_t idx = workers_.size();
            workers_.emplace_back([this, idx] { worker_loop(idx); });
        }
    }

    void worker_loop(size_t idx) {
        uint64_t seen = 0;
        for (;;) {
            std::unique_lock<std::mutex> lock(mutex_);
            cv_.wait(lock, [&] { return stopping_ || generation_ != seen; });
            if (stopping_) return;
            seen = generation_;
            const auto* fn = job_fn_;
            const size_t n = job_n_;
            const size_t chunks = job_chunks_;
            lock.unlock();
            // Workers beyond this job's participant count have no chunk.
            if (idx + 1 < chunks && fn) {
                run_chunk(idx, n, chunks, *fn);
                std::lock_guard<std::mutex> lk(mutex_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    void stop() {
        {
            std::lock_guard<std::mutex> lk(mutex_);
            stopping_ = true;
            cv_.notify_all();
        }
        for (auto& t : workers_) t.join();
        workers_.clear();
        stopping_ = false;
    }

    std::mutex mutex_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    std::vector<std::thread> workers_;
    const std::function<void(size_t, size_t)>* job_fn_ = nullptr;
    size_t job_n_ = 0;
    size_t job_chunks_ = 0;
    size_t pending_ = 0;
    uint64_t generation_ = 0;
    size_t requested_;
    bool stopping_ = false;
};

Pool& pool() {
    static Pool p;
    return p;
}

thread_local bool t_in_parallel = false;

// Small matmuls are not worth a trip through the pool.
constexpr size_t kParallelFlops = 1 << 16;

}  // namespace

const char* backend_name(Backend b) {
    switch (b) {
        case Backend::scalar: return "scalar";
        case Backend::avx2: return "avx2";
    }
    return "?";
}

bool cpu_supports(Backend b) {
    return b == Backend::scalar || (b == Backend::avx2 && cpu_has_avx2());
}

Backend active_backend() {
    table();
    return g_backend.load(std::memory_order_acquire);
}

void set_backend(Backend b) {
    if (!cpu_supports(b)) {
        throw ConfigError(std::string("kernel backend not supported on this CPU: ") +
                          backend_name(b));
    }
    g_table.store(b == Backend::scalar ? &scalar_table() : &avx2_table(),
                  std::memory_order_release);
    g_backend.store(b, std::memory_order_release);
}

float dot(const float* a, const float* b, size_t n) { return table().dot_f(a, b, n); }
double dot(const double* a, const double* b, size_t n) { return table().dot_d(a, b, n); }
float l2sq(const float* a, const float* b, size_t n) { return table().l2sq_f(a, b, n); }
double l2sq(const double* a, const double* b, size_t n) { return table().l2sq_d(a, b, n); }
void axpy(float alpha, const float* x, float* y, size_t n) { table().axpy_f(alpha, x, y, n); }
void axpy(double alpha, const double* x, double* y, size_t n) { table().axpy_d(alpha, x, y, n); }
void scale(float alpha, float* x, size_t n) { table().scale_f(alpha, x, n); }
void scale(double alpha, double* x, size_t n) { table().scale_d(alpha, x, n); }

namespace {

template <typename RowFn>
void run_rows(size_t m, size_t k, size_t n, RowFn&& rows) {
    if (m >= 2 && m * k * n >= kParallelFlops && !t_in_parallel) {
        parallel_for(m, [&](size_t i0, size_t i1) { rows(i0, i1); });
    } else {
        rows(0, m);
    }
}

}  // namespace

void matmul_nn(const float* a, const float* b, float* c, size_t m, size_t k, size_t n) {
    const auto& t = table();
    run_rows(m, k, n, [&](size_t i0, size_t i1) { t.matmul_nn_f(a, b, c, i0, i1, k, n); });
}
void matmul_nn(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    const auto& t = table();
    run_rows(m, k, n, [&](size_t i0, size_t i1) { t.matmul_nn_d(a, b, c, i0, i1, k, n); });
}
void matmul_nt(const float* a, const float* b, float* c, size_t m, size_t k, size_t n) {
    const auto& t = table();
    run_rows(m, k, n, [&](size_t i0, size_t i1) { t.matmul_nt_f(a, b, c, i0, i1, k, n); });
}
void matmul_nt(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    const auto& t = table();
    run_rows(m, k, n, [&](size_t i0, size_t i1) { t.matmul_nt_d(a, b, c, i0, i1, k, n); });
}
void matmul_tn(const float* a, const float* b, float* c, size_t m, size_t k, size_t n) {
    const auto& t = table();
    run_rows(m, k, n, [&](size_t i0, size_t i1) { t.matmul_tn_f(a, b, c, i0, i1, k, n, m); });
}
void matmul_tn(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    const auto& t = table();
    run_rows(m, k, n, [&](size_t i0, size_t i1) { t.matmul_tn_d(a, b, c, i0, i1, k, n, m); });
}

void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn) {
    if (t_in_parallel) {
        fn(0, n);
        return;
    }
    std::function<void(size_t, size_t)> wrapped = [&fn](size_t b, size_t e) {
        const bool prev = t_in_parallel;
        t_in_parallel = true;
        fn(b, e);
        t_in_parallel = prev;
    };
    pool().run(n, wrapped);
}

size_t thread_count() { return pool().threads(); }
void set_thread_count(size_t n) { pool().set_threads(n); }

}  // namespace meow::kernels
