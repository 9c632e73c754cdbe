// Walks through one attack on the PJM 5-bus fixture: sensitivities of the
// target line, an optimal stealth attack against the residual detector, and
// the mixed strategies of a small payoff game.
//
//   pjm5_walkthrough [fixtures/pjm5.json]

#include <cstdio>
#include <string>

#include "fdi/fdi.hpp"

int main(int argc, char** argv) {
  const std::string path = argc > 1 ? argv[1] : "fixtures/pjm5.json";
  try {
    const auto grid = fdi::load_case(path);
    const auto model = fdi::build_estimator(fdi::build_jacobian(grid, grid.meters), 1.0);
    const auto line = fdi::line_sensitivity(model, grid, 2, 3);
    const auto labels = grid.meters.labels();

    std::printf("sensitivity of line 2-3 to each meter (MW/MW):\n");
    for (std::size_t k = 0; k < labels.size(); ++k) {
      std::printf("  %-4s % .5f\n", labels[k].c_str(), line.G(static_cast<Eigen::Index>(k)));
    }

    const std::vector<std::size_t> support = {4, 9};  // z5, z10
    const auto problem = fdi::make_attack_problem(line.G, support, fdi::SeBudget{9.48});
    const auto attack = fdi::solve_attack_se(model, problem);
    std::printf("\nstealth attack on z5,z10 with zeta = 9.48 MW\n");
    std::printf("  z5 %+.3f MW, z10 %+.3f MW\n", attack.z_a(4), attack.z_a(9));
    std::printf("  residual %.3f MW, line shift %.3f MW\n", fdi::residual(model, attack.z_a).norm, attack.utility);

    const auto game = fdi::solve_game(fdi::load_game_csv(path.substr(0, path.find_last_of('/') + 1) + "table2.csv").S);
    std::printf("\nreference game: value %.3f MW, attacker mix", game.attacker.game_value);
    for (Eigen::Index j = 0; j < game.attacker.probabilities.size(); ++j) {
      std::printf(" %.3f", game.attacker.probabilities(j));
    }
    std::printf("\n");
  } catch (const fdi::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return fdi::exit_code_for(e.category());
  }
  return 0;
}
