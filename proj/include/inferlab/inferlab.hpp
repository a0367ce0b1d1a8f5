// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include "inferlab/acceptance.hpp"
#include "inferlab/attention.hpp"
#include "inferlab/common.hpp"
#include "inferlab/grpo.hpp"
#include "inferlab/harness.hpp"
#include "inferlab/lookahead.hpp"
#include "inferlab/matrix.hpp"
#include "inferlab/metrics.hpp"
#include "inferlab/model.hpp"
#include "inferlab/paged_kv.hpp"
#include "inferlab/pruning.hpp"
#include "inferlab/quantize.hpp"
#include "inferlab/session.hpp"
#include "inferlab/tts.hpp"
#include "inferlab/weights_io.hpp"
