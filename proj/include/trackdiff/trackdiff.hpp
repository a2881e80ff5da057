#pragma once

#include "trackdiff/attention.hpp"
#include "trackdiff/checkpoint.hpp"
#include "trackdiff/conditioning.hpp"
#include "trackdiff/config.hpp"
#include "trackdiff/denoiser.hpp"
#include "trackdiff/diffusion.hpp"
#include "trackdiff/enhancer.hpp"
#include "trackdiff/errors.hpp"
#include "trackdiff/evalkit.hpp"
#include "trackdiff/geometry.hpp"
#include "trackdiff/gradcheck.hpp"
#include "trackdiff/gradsuite.hpp"
#include "trackdiff/layers.hpp"
#include "trackdiff/rng.hpp"
#include "trackdiff/tensor.hpp"
#include "trackdiff/trackdata.hpp"
