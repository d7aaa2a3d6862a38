#pragma once

/// Umbrella header for the attnlab library.

#include <attnlab/attention.hpp>
#include <attnlab/calibration.hpp>
#include <attnlab/erm.hpp>
#include <attnlab/gamp.hpp>
#include <attnlab/io.hpp>
#include <attnlab/manifest.hpp>
#include <attnlab/parallel.hpp>
#include <attnlab/phase.hpp>
#include <attnlab/prox.hpp>
#include <attnlab/quadrature.hpp>
#include <attnlab/random.hpp>
#include <attnlab/state_evolution.hpp>
#include <attnlab/tensor.hpp>
