/*=========================================================================
 *
 *  Copyright The LMC Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *         http://www.apache.org/licenses/LICENSE-2.0.txt
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 *
 *=========================================================================*/

#pragma once

#include "lmc/checkpoint.hpp"
#include "lmc/config.hpp"
#include "lmc/csv.hpp"
#include "lmc/encoder.hpp"
#include "lmc/error.hpp"
#include "lmc/image.hpp"
#include "lmc/image_io.hpp"
#include "lmc/loss.hpp"
#include "lmc/manifold.hpp"
#include "lmc/metrics.hpp"
#include "lmc/rng.hpp"
#include "lmc/stain.hpp"
#include "lmc/trainer.hpp"
