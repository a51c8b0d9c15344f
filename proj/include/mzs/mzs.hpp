#pragma once

#include "mzs/dapt.hpp"
#include "mzs/embedder.hpp"
#include "mzs/http_embedder.hpp"
#include "mzs/lung_seg.hpp"
#include "mzs/metrics.hpp"
#include "mzs/montage_io.hpp"
#include "mzs/patch_engine.hpp"
#include "mzs/pipeline.hpp"
#include "mzs/pipeline_config.hpp"
#include "mzs/prompt.hpp"
#include "mzs/reader_service.hpp"
#include "mzs/report_parser.hpp"
#include "mzs/synth_phantom.hpp"
#include "mzs/volume_io.hpp"
#include "mzs/zeroshot.hpp"
