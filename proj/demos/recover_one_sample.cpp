// Recovers the audio stream of one test sample: retrieve the top-n audio
// entries by the visual key, then purify them against the visual context and
// the question. Prints the retrieved ids and the purification record.

#include <iostream>

#include "ravqa/experiment.hpp"

using namespace ravqa;

int main() {
    SyntheticSpec spec;
    spec.num_classes = 8;
    spec.attribute_values = 2;
    spec.train_samples = 128;
    spec.test_samples = 4;
    spec.unified_space = true;
    spec.audio_dim = spec.visual_dim = 8;
    spec.seq_len = 8;
    const SyntheticData data = gen_synthetic(spec);

    ExperimentConfig cfg;
    cfg.model.d_model = 16;
    cfg.model.depth = 1;
    Model model = init_model(cfg.model_for(spec), 1);
    TrainConfig tc;
    tc.stage1_epochs = 3;
    stage1_pretrain(model, data.train, nullptr, tc);

    const MemoryBank bank = build_bank(bank_records(data.train, Modality::audio), Modality::audio, "train");
    const ModalityBundle& sample = data.test.samples.front();

    PurificationConfig pc;
    pc.k_purge = 3;
    pc.n_retrieve = 3;
    const auto hits = query_topn(bank, {sample.key(Modality::visual), pc.n_retrieve, {}});
    std::vector<Tensor> candidates;
    for (const auto& h : hits) {
        std::cout << "retrieved " << h.id << " (cosine " << h.score << ")\n";
        candidates.push_back(bank.value(h.index));
    }

    const CapResult r = cap_purify(model, Modality::audio, *sample.visual, sample.question, candidates, pc);
    std::cout << purification_record(sample.id, r.noise, r.guidance, r.output.provenance).dump(2) << "\n";
}
