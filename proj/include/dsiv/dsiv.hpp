#pragma once

#include "dsiv/bench.hpp"
#include "dsiv/cfr.hpp"
#include "dsiv/config.hpp"
#include "dsiv/decompose.hpp"
#include "dsiv/errors.hpp"
#include "dsiv/grad_check.hpp"
#include "dsiv/nn.hpp"
#include "dsiv/panel.hpp"
#include "dsiv/rng.hpp"
#include "dsiv/simgen.hpp"
#include "dsiv/tensor.hpp"
