// Conditions an ill-conditioned token matrix with both corrections, then runs a
// short baseline vs conditioned training comparison.
#include <cstdio>

#include "condtok/condtok.hpp"

namespace ct = condtok;

namespace {

void report(const char* label, const ct::Matrix& x) {
    const ct::ConditionReport c = ct::condition_number(x);
    std::printf("%-14s sigma_max %9.4f  sigma_min %9.2e  kappa %.6g\n", label, c.sigma_max, c.sigma_min, c.kappa);
}

}  // namespace

int main() {
    ct::Rng rng(7);
    ct::Matrix x = ct::Matrix::random_uniform(8, 4, -1, 1, rng);
    for (std::size_t i = 0; i < x.rows(); ++i) x(i, 3) = x(i, 0) + 1e-4 * x(i, 3);

    report("X", x);
    report("X + exact", ct::apply_correction(x, ct::exact_correction(x)));
    for (double lambda : {1.0, 10.0, 100.0}) {
        const std::string label = "X + " + ct::format_real(lambda) + " I_k";
        report(label.c_str(), ct::apply_correction(x, ct::identity_correction(x.rows(), x.cols(), lambda)));
    }

    ct::TrainConfig base;
    base.model.seq_len = 8;
    base.model.token_dim = 4;
    base.model.embed_dim = 8;
    base.model.heads = 2;
    base.model.layers = 1;
    base.model.ff_multiplier = 2;
    base.task.num_samples = 16;
    base.task.probe_samples = 4;
    base.epochs = 5;
    base.batch_size = 4;
    base.seed = 3;
    ct::TrainConfig cond = base;
    cond.model.correction = ct::CorrectionSpec::identity(10.0);

    const ct::Comparison cmp = ct::compare_runs(base, cond);
    std::printf("\n%s\n", ct::to_json(cmp.summary).dump(2).c_str());
    return 0;
}
