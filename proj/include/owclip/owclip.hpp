#pragma once

#include "owclip/api.hpp"
#include "owclip/bench.hpp"
#include "owclip/checkpoint.hpp"
#include "owclip/config.hpp"
#include "owclip/crop_smoothing.hpp"
#include "owclip/discovery.hpp"
#include "owclip/embedding_store.hpp"
#include "owclip/error.hpp"
#include "owclip/evaluation.hpp"
#include "owclip/http_server.hpp"
#include "owclip/image_encoder.hpp"
#include "owclip/llm_http.hpp"
#include "owclip/manifest.hpp"
#include "owclip/phrase_gen.hpp"
#include "owclip/prompt_block.hpp"
#include "owclip/prompt_tuner.hpp"
#include "owclip/refinement.hpp"
#include "owclip/session.hpp"
#include "owclip/synthetic.hpp"
#include "owclip/text_encoder.hpp"
#include "owclip/workbench.hpp"
