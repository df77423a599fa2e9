#pragma once

#include "proconda/asm_model.hpp"
#include "proconda/machine.hpp"
#include "proconda/ident.hpp"
#include "proconda/slice.hpp"
#include "proconda/rewrite.hpp"
#include "proconda/harness.hpp"
#include "proconda/serialize.hpp"
#include "proconda/config.hpp"
#include "proconda/cli.hpp"
