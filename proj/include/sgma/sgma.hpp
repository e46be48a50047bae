// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "sgma/allocation.hpp"
#include "sgma/clients.hpp"
#include "sgma/encoder.hpp"
#include "sgma/engine.hpp"
#include "sgma/evaluation.hpp"
#include "sgma/gradcheck.hpp"
#include "sgma/grounding.hpp"
#include "sgma/objectives.hpp"
#include "sgma/pipeline.hpp"
#include "sgma/registry.hpp"
#include "sgma/saliency.hpp"
#include "sgma/tiny_clip.hpp"
