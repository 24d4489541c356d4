#include "vare/common.hpp"

#include <atomic>
#include <cstdlib>
#include <malloc.h>

namespace vare {

namespace {

// Graph buffers are MB-sized and churn fast; keep them in the arena instead
// of mmap/munmap per allocation.
const bool malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
    return true;
}();

thread_local bool tl_in_worker = false;

struct Pool {
    struct Job {
        const std::function<void(int64_t, int64_t)>* body = nullptr;
        int64_t n = 0;
        int64_t chunk = 0;
        std::atomic<int64_t> next{0};
        int remaining = 0;  // guarded by mu
    };

    std::vector<std::thread> workers;
    std::mutex mu;
    std::condition_variable cv_work;
    std::condition_variable cv_done;
    Job* job = nullptr;      // guarded by mu
    uint64_t generation = 0;  // guarded by mu; each worker joins a generation once
    bool stop = false;

    explicit Pool(int threads) {
        for (int t = 0; t < threads - 1; ++t) {
            workers.emplace_back([this] { worker_loop(); });
        }
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lk(mu);
            stop = true;
        }
        cv_work.notify_all();
        for (auto& w : workers) w.join();
    }

    void worker_loop() {
        tl_in_worker = true;
        uint64_t seen = 0;
        for (;;) {
            Job* j = nullptr;
            {
                std::unique_lock<std::mutex> lk(mu);
                cv_work.wait(lk, [&] { return stop || generation != seen; });
                if (stop) return;
                seen = generation;
                j = job;
            }
            run_chunks(*j);
            {
                std::lock_guard<std::mutex> lk(mu);
                if (--j->remaining == 0) cv_done.notify_all();
            }
        }
    }

    static void run_chunks(Job& j) {
        for (;;) {
            int64_t begin = j.next.fetch_add(j.chunk);
            if (begin >= j.n) break;
            int64_t end = std::min(j.n, begin + j.chunk);
            (*j.body)(begin, end);
        }
    }

    void run(const std::function<void(int64_t, int64_t)>& body, int64_t n, int64_t chunk) {
        Job j;
        j.body = &body;
        j.n = n;
        j.chunk = chunk;
        j.remaining = int(workers.size()) + 1;
        {
            std::lock_guard<std::mutex> lk(mu);
            job = &j;
            ++generation;
        }
        cv_work.notify_all();
        run_chunks(j);
        {
            std::unique_lock<std::mutex> lk(mu);
            --j.remaining;
            cv_done.wait(lk, [&] { return j.remaining == 0; });
        }
        // every participant has decremented; j may be destroyed
    }
};

}  // namespace

int thread_count() {
    static int n = [] {
        if (const char* env = std::getenv("VARE_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hc = std::thread::hardware_concurrency();
        return hc ? int(hc) : 1;
    }();
    return n;
}

void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& body) {
    if (n <= 0) return;
    const int threads = thread_count();
    if (threads <= 1 || n <= grain || tl_in_worker) {
        body(0, n);
        return;
    }
    static Pool pool(threads);
    // Fixed chunk size: the partition (and thus per-element arithmetic order)
    // does not depend on scheduling.
    int64_t chunk = (n + threads * 4 - 1) / (threads * 4);
    if (chunk < grain) chunk = grain;
    tl_in_worker = true;
    pool.run(body, n, chunk);
    tl_in_worker = false;
}

}  // namespace vare
