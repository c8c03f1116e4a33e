#pragma once

#include "pointperc/codecs.hpp"
#include "pointperc/decoder.hpp"
#include "pointperc/demos.hpp"
#include "pointperc/episodes.hpp"
#include "pointperc/errors.hpp"
#include "pointperc/flat_api.hpp"
#include "pointperc/geometry.hpp"
#include "pointperc/gradcheck.hpp"
#include "pointperc/gradcheck_suite.hpp"
#include "pointperc/metrics.hpp"
#include "pointperc/random.hpp"
#include "pointperc/report.hpp"
#include "pointperc/sapl.hpp"
#include "pointperc/tensor.hpp"
#include "pointperc/toy_data.hpp"
