#pragma once

#include <doctest.h>

#include "circuit_lens/common.hpp"

// Expects `expr` to throw circuit_lens::Error carrying `expected`.
#define CHECK_ERROR_CODE(expr, expected)                                  \
  do {                                                                    \
    try {                                                                 \
      (void)(expr);                                                       \
      FAIL_CHECK("no error from " #expr);                                 \
    } catch (const ::circuit_lens::Error& caught_) {                      \
      CHECK_MESSAGE(caught_.code() == (expected), caught_.what());        \
    }                                                                     \
  } while (0)
