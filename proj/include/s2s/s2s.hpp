#pragma once

#include "s2s/adam.hpp"
#include "s2s/autodiff.hpp"
#include "s2s/config.hpp"
#include "s2s/denoiser.hpp"
#include "s2s/errors.hpp"
#include "s2s/geometry.hpp"
#include "s2s/io.hpp"
#include "s2s/metrics.hpp"
#include "s2s/params.hpp"
#include "s2s/phantom.hpp"
#include "s2s/pipeline.hpp"
#include "s2s/recon.hpp"
#include "s2s/spectral.hpp"
#include "s2s/spectral_prior.hpp"
#include "s2s/tensor.hpp"
