#ifndef OPTCLEAR_OPTCLEAR_HPP
#define OPTCLEAR_OPTCLEAR_HPP

#include "optclear/clearing.hpp"
#include "optclear/copperplate.hpp"
#include "optclear/errors.hpp"
#include "optclear/market.hpp"
#include "optclear/network.hpp"
#include "optclear/options.hpp"
#include "optclear/parallel.hpp"
#include "optclear/qp.hpp"
#include "optclear/scenario.hpp"

#endif  // OPTCLEAR_OPTCLEAR_HPP
