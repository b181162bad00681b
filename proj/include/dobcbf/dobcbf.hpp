#pragma once

#include "dobcbf/core.hpp"
#include "dobcbf/dynamics.hpp"
#include "dobcbf/observer.hpp"
#include "dobcbf/hocbf.hpp"
#include "dobcbf/qp.hpp"
#include "dobcbf/envs/plant.hpp"
#include "dobcbf/envs/unicycle.hpp"
#include "dobcbf/envs/quadrotor.hpp"
#include "dobcbf/policy.hpp"
#include "dobcbf/bridge.hpp"
#include "dobcbf/episode.hpp"
#include "dobcbf/harness.hpp"
