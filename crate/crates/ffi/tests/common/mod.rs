use std::path::Path;

use pscbm::data::PipelineConfig;
use pscbm::pipeline::{run_in_memory, Inputs};
use pscbm::synth::{generate, SynthData, SynthSpec};

/// Small synthetic task with a trained model saved to `dir/model.json`.
pub fn trained_fixture(dir: &Path) -> (SynthData, pscbm::TrainedModel) {
    let spec = SynthSpec {
        num_classes: 4,
        shared_concepts: 2,
        classes_per_shared: 2,
        dim: 16,
        n_per_class: 30,
        n_test_per_class: 10,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.cbl.max_steps = 1500;
    data.write_dir(dir, &cfg).unwrap();
    let mut paths = SynthData::input_paths();
    for p in [
        &mut paths.concepts,
        &mut paths.text_embeddings,
        &mut paths.train_embeddings,
        &mut paths.train_labels,
        &mut paths.test_embeddings,
        &mut paths.test_labels,
    ] {
        *p = dir.join(&*p);
    }
    let inputs = Inputs::load(&paths).unwrap();
    let run = run_in_memory(&cfg, &inputs).unwrap();
    run.model.save(dir.join("model.json")).unwrap();
    (data, run.model)
}
