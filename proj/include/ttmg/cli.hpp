#pragma once

#include <ostream>
#include <string>

#include "ttmg/segnet.hpp"
#include "ttmg/trainer.hpp"

namespace ttmg::cli {

// Reconstruct the architecture a checkpoint was trained with from its
// parameter shapes; the method flag restores the switches a checkpoint
// cannot carry.
seg::SegNetConfig net_from_checkpoint(const seg::ParamStore& params, train::Method method,
                                      int kmeans_k = 3, int kmeans_s = 1);

// Finite-difference verification groups; returns the worst relative error.
// "negative" runs a deliberately broken backward rule and must report a
// large error, proving the checker can fail.
double gradcheck_group(const std::string& group);

// Entry point behind main(): parses argv, dispatches the subcommands,
// translates exceptions into nonzero exits with a message on stderr.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace ttmg::cli
