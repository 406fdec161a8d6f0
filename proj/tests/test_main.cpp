#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <string>

#include "doctest.h"

namespace testutil {

std::string scratch_dir() {
  static const std::string dir = [] {
    auto path = std::filesystem::temp_directory_path() / "freenet_tests";
    std::filesystem::create_directories(path);
    return path.string();
  }();
  return dir;
}

}  // namespace testutil
