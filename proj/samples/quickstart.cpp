// Trains a small model on a synthetic corpus and reports frame-level metrics.
//
//   hvad_quickstart [work_dir] [epochs]

#include <cstdlib>
#include <iostream>
#include <string>

#include "hvad/hvad.hpp"
#include "hvad/pipeline.hpp"

using namespace hvad;

int main(int argc, char** argv) {
    const fs::path work = argc > 1 ? argv[1] : "quickstart_work";
    const std::size_t epochs = argc > 2 ? std::stoul(argv[2]) : 3;
    try {
        SynthSpec spec;
        spec.frame_width = 40;
        spec.frame_height = 40;
        spec.frames = 30;
        spec.anomaly_first = 12;
        spec.anomaly_last = 18;
        const ManifestFile mf = synth_corpus(spec, work / "corpus");
        FrameStore<float> train_store(mf.train);
        FrameStore<float> test_store(mf.test);

        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.batch_size = 256;
        cfg.model.frame_width = spec.frame_width;
        cfg.model.frame_height = spec.frame_height;
        TrainOptions opt;
        opt.log = [](const std::string& line) { std::cout << line << '\n'; };
        fs::remove_all(work / "run");
        const TrainResult res = train(train_store, cfg, work / "run", opt);

        HybridModel<float> model = model_from_checkpoint<float>(load_checkpoint(res.checkpoint));
        const WeightMaps w = fit_weights(model, train_store);
        const SplitScores ss = score_split(model, test_store, w);
        std::cout << "held-out position accuracy " << ss.accuracy.both() << '\n';
        for (FusionMode mode : {FusionMode::xy, FusionMode::R, FusionMode::Rxy}) {
            const Metrics m = evaluate(ss.videos, mode);
            std::cout << mode_name(mode) << ": AUC " << m.auc << ", AP " << m.ap << '\n';
        }
    } catch (const std::exception& e) {
        std::cerr << e.what() << '\n';
        return EXIT_FAILURE;
    }
    return EXIT_SUCCESS;
}
