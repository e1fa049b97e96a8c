#pragma once

#include <condition_variable>
#include <functional>
#include <mutex>
#include <queue>
#include <thread>
#include <vector>

namespace desklm {

// Persistent worker pool with a blocking parallel_for. Workers write to
// disjoint output slots, so results are identical regardless of scheduling.
class ThreadPool {
   public:
    explicit ThreadPool(unsigned n_threads = 0) {
        if (n_threads == 0) {
            n_threads = std::max(1u, std::thread::hardware_concurrency());
        }
        for (unsigned i = 0; i < n_threads; ++i) {
            workers_.emplace_back([this] { work_loop(); });
        }
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stopping_ = true;
        }
        cv_.notify_all();
        for (auto& w : workers_) {
            w.join();
        }
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    size_t size() const { return workers_.size(); }

    // Runs fn(i) for i in [begin, end); blocks until all are done. Exceptions
    // from fn propagate to the caller (first one wins).
    void parallel_for(size_t begin, size_t end, const std::function<void(size_t)>& fn) {
        if (end <= begin) {
            return;
        }
        size_t count = end - begin;
        // Nested calls run serially; workers must never block on the queue.
        if (count == 1 || workers_.size() == 1 || inside_pool()) {
            for (size_t i = begin; i < end; ++i) {
                fn(i);
            }
            return;
        }
        struct Batch {
            std::mutex mu;
            std::condition_variable done;
            size_t next;
            size_t limit;
            size_t active = 0;
            std::exception_ptr error;
            const std::function<void(size_t)>* fn;
        };
        Batch batch;
        batch.next = begin;
        batch.limit = end;
        batch.fn = &fn;

        auto runner = [&batch] {
            for (;;) {
                size_t i;
                {
                    std::lock_guard<std::mutex> lk(batch.mu);
                    if (batch.next >= batch.limit || batch.error) {
                        return;
                    }
                    i = batch.next++;
                }
                try {
                    (*batch.fn)(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lk(batch.mu);
                    if (!batch.error) {
                        batch.error = std::current_exception();
                    }
                    return;
                }
            }
        };

        size_t helpers = std::min(workers_.size(), count) - 1;
        {
            std::lock_guard<std::mutex> lk(mu_);
            batch.active = helpers;
            for (size_t i = 0; i < helpers; ++i) {
                tasks_.push([&batch, runner] {
                    runner();
                    std::lock_guard<std::mutex> lk(batch.mu);
                    if (--batch.active == 0) {
                        batch.done.notify_one();
                    }
                });
            }
        }
        cv_.notify_all();
        runner();  // caller participates
        std::unique_lock<std::mutex> lk(batch.mu);
        batch.done.wait(lk, [&batch] { return batch.active == 0; });
        if (batch.error) {
            std::rethrow_exception(batch.error);
        }
    }

   private:
    static bool& inside_pool() {
        thread_local bool flag = false;
        return flag;
    }

    void work_loop() {
        inside_pool() = true;
        for (;;) {
            std::function<void()> task;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [this] { return stopping_ || !tasks_.empty(); });
                if (stopping_ && tasks_.empty()) {
                    return;
                }
                task = std::move(tasks_.front());
                tasks_.pop();
            }
            task();
        }
    }

    std::vector<std::thread> workers_;
    std::queue<std::function<void()>> tasks_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool stopping_ = false;
};

// Shared pool for stages that parallelize internally.
ThreadPool& global_pool();

}  // namespace desklm
