#pragma once

#include "aggregation.hpp"
#include "bench.hpp"
#include "bundle.hpp"
#include "config.hpp"
#include "errors.hpp"
#include "experiment.hpp"
#include "featureio.hpp"
#include "gradcheck.hpp"
#include "manifest.hpp"
#include "pipeline.hpp"
#include "projection.hpp"
#include "retrieval.hpp"
#include "rng.hpp"
#include "synthetic.hpp"
#include "training.hpp"
#include "types.hpp"
#include "vocabulary.hpp"
