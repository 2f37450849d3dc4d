#pragma once

#include <cerrno>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <string>

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "detkit/error.hpp"
#include "detkit/scaling.hpp"

namespace detkit {

// Scale oracle backed by a child process. The child is started once via
// /bin/sh -c; for each query it receives "depth width resolution\n" on stdin
// and must answer with one score line on stdout.
class ExecOracle {
 public:
  explicit ExecOracle(const std::string& command) {
    std::signal(SIGPIPE, SIG_IGN);
    int to_child[2];
    int from_child[2];
    if (::pipe(to_child) != 0) throw data_error("exec oracle: pipe failed");
    if (::pipe(from_child) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw data_error("exec oracle: pipe failed");
    }
    pid_ = ::fork();
    if (pid_ < 0) throw data_error("exec oracle: fork failed");
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    in_ = ::fdopen(to_child[1], "w");
    out_ = ::fdopen(from_child[0], "r");
    if (!in_ || !out_) throw data_error("exec oracle: fdopen failed");
  }

  ExecOracle(const ExecOracle&) = delete;
  ExecOracle& operator=(const ExecOracle&) = delete;

  ~ExecOracle() {
    if (in_) std::fclose(in_);
    if (out_) std::fclose(out_);
    if (pid_ > 0) {
      int status = 0;
      ::waitpid(pid_, &status, 0);
    }
  }

  double operator()(const ScaleTriple& t) {
    if (std::fprintf(in_, "%.17g %.17g %.17g\n", t.depth, t.width, t.resolution) < 0 || std::fflush(in_) != 0)
      throw data_error("exec oracle: child closed its input");
    char buf[256];
    if (!std::fgets(buf, sizeof buf, out_)) throw data_error("exec oracle: no score returned");
    char* end = nullptr;
    const double v = std::strtod(buf, &end);
    if (end == buf) throw data_error(std::string("exec oracle: unparsable score line: ") + buf);
    return v;
  }

 private:
  pid_t pid_ = -1;
  std::FILE* in_ = nullptr;
  std::FILE* out_ = nullptr;
};

}  // namespace detkit
