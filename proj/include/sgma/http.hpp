// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// cpp-httplib pulls in <resolv.h>, whose `_res` macro collides with Eigen
// parameter names. Eigen goes first and the macro is dropped afterwards.

#pragma once

#include <Eigen/Dense>

#include <httplib.h>

#ifdef _res
#undef _res
#endif
