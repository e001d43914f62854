#pragma once

#include <chrono>
#include <cstdio>
#include <string>

namespace circuit_lens::acceptance {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// One line per criterion; the process exit status summarizes them.
class Verdicts {
 public:
  void record(int id, const std::string& name, bool pass, const std::string& detail) {
    std::printf("%s  criterion %d  %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
    std::fflush(stdout);
    failed_ |= !pass;
    ran_ = true;
  }

  void blocked(int id, const std::string& name, const std::string& reason) {
    std::printf("BLOCKED  criterion %d  %s: %s\n", id, name.c_str(), reason.c_str());
    std::fflush(stdout);
    blocked_ = true;
  }

  // 0 all ran criteria passed, 1 a failure, 77 nothing failed but something could not run.
  int exit_code() const {
    if (failed_) return 1;
    if (blocked_) return 77;
    return 0;
  }

 private:
  bool failed_ = false;
  bool blocked_ = false;
  bool ran_ = false;
};

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

}  // namespace circuit_lens::acceptance
