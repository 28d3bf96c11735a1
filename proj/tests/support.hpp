#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "senaudit/error.hpp"

namespace testing_support {

// Runs f and reports which ErrorCode (if any) it threw.
inline std::string thrown_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const senaudit::Error& e) {
    return std::string(senaudit::to_string(e.code()));
  }
  return "none";
}

#define EXPECT_ERROR_CODE(code, expr) \
  EXPECT_EQ(::testing_support::thrown_code([&] { (void)(expr); }), std::string(#code))

inline std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("senaudit-test-" + name + "-" +
                                                       std::to_string(std::random_device{}()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_support
