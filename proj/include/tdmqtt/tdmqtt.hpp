#pragma once

#include "tdmqtt/client.hpp"
#include "tdmqtt/codec.hpp"
#include "tdmqtt/config.hpp"
#include "tdmqtt/edge_broker.hpp"
#include "tdmqtt/errors.hpp"
#include "tdmqtt/eval.hpp"
#include "tdmqtt/master_broker.hpp"
#include "tdmqtt/net.hpp"
#include "tdmqtt/types.hpp"
