#include "hsi/common.hpp"

#include <atomic>

namespace hsi {

namespace {
std::atomic<int> g_num_threads{1};
}

void set_num_threads(int n) { g_num_threads.store(n < 1 ? 1 : n); }

int num_threads() { return g_num_threads.load(); }

}  // namespace hsi
