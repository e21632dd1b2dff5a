#pragma once

#include "cocolm/adamw.hpp"
#include "cocolm/encoder.hpp"
#include "cocolm/error.hpp"
#include "cocolm/kg_store.hpp"
#include "cocolm/masking.hpp"
#include "cocolm/probe.hpp"
#include "cocolm/random.hpp"
#include "cocolm/relation.hpp"
#include "cocolm/synth_kg.hpp"
#include "cocolm/trainer.hpp"
#include "cocolm/verbalizer.hpp"
#include "cocolm/walk_sampler.hpp"
#include "cocolm/gradcheck.hpp"
#include "cocolm/pipeline_config.hpp"
