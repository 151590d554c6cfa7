#pragma once

// Shared HTTP plumbing for the Wikidata and chat-completion clients.

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <functional>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

namespace popcal {

struct RetryPolicy {
  int max_retries = 4;
  std::chrono::milliseconds base_delay{200};
  std::chrono::milliseconds max_delay{10000};
};

// Minimum spacing between request starts; rps <= 0 disables the cap.
class RateLimiter {
 public:
  explicit RateLimiter(double rps = 0.0) : rps_(rps) {}
  void acquire();

 private:
  double rps_;
  std::mutex mu_;
  std::chrono::steady_clock::time_point next_{};
};

class Semaphore {
 public:
  explicit Semaphore(std::size_t permits) : permits_(permits) {}
  void acquire() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return permits_ > 0; });
    --permits_;
  }
  void release() {
    {
      std::lock_guard lock(mu_);
      ++permits_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::size_t permits_;
};

struct HttpRequest {
  std::string method = "POST";  // POST or GET
  std::string url;              // absolute: scheme://host[:port]/path[?query]
  std::string body;
  std::vector<std::pair<std::string, std::string>> headers;
  std::chrono::milliseconds timeout{30000};
};

struct HttpResponse {
  int status = 0;
  std::string body;
  int attempts = 0;
};

// Splits an absolute URL into "scheme://host:port" and "/path?query".
std::pair<std::string, std::string> split_url(const std::string& url);

bool is_transient_status(int status);

// Sends with retries on connection failures, 429 and 5xx, sleeping
// base_delay * 2^attempt (capped) between tries. A non-transient status is
// returned as is; exhausted retries throw ServiceError.
HttpResponse send_with_retry(const HttpRequest& request, const RetryPolicy& retry,
                             RateLimiter* limiter = nullptr);

// Runs fn(0..n-1) on at most `workers` threads; exceptions are rethrown
// after all tasks finish (first by index).
void parallel_for_bounded(std::size_t n, std::size_t workers,
                          const std::function<void(std::size_t)>& fn);

std::string url_encode(std::string_view s);

}  // namespace popcal
