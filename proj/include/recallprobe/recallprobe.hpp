#pragma once

#include "recallprobe/attribution.hpp"
#include "recallprobe/candidates.hpp"
#include "recallprobe/config.hpp"
#include "recallprobe/container.hpp"
#include "recallprobe/corpus.hpp"
#include "recallprobe/dataset.hpp"
#include "recallprobe/errors.hpp"
#include "recallprobe/experiments.hpp"
#include "recallprobe/forward.hpp"
#include "recallprobe/io.hpp"
#include "recallprobe/lens.hpp"
#include "recallprobe/matrix.hpp"
#include "recallprobe/metrics.hpp"
#include "recallprobe/plan.hpp"
#include "recallprobe/query.hpp"
#include "recallprobe/report.hpp"
#include "recallprobe/synthetic.hpp"
#include "recallprobe/tokenizer.hpp"
#include "recallprobe/trace.hpp"
#include "recallprobe/weights.hpp"
