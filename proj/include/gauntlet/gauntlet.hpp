#pragma once

#include "gauntlet/error.hpp"
#include "gauntlet/rng.hpp"
#include "gauntlet/tokenizer.hpp"
#include "gauntlet/corpus.hpp"
#include "gauntlet/commitment.hpp"
#include "gauntlet/coin_verifier.hpp"
#include "gauntlet/coin_attacks.hpp"
#include "gauntlet/palace.hpp"
#include "gauntlet/martingale.hpp"
#include "gauntlet/output.hpp"
#include "gauntlet/harness_config.hpp"
#include "gauntlet/harness.hpp"
