use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use persona_ecosystem::corpus::ingest;
use persona_ecosystem::grounding::CrossValidationReport;
use persona_ecosystem::pipeline::{Pipeline, PipelineConfig, Stage, MANIFEST_FILE};
use persona_ecosystem::simulation::Transcript;

fn sample() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/sample_posts.jsonl")
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn sample_run_completes_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(dir.path(), PipelineConfig::default()).unwrap();
    let report = p.run_all(&sample()).unwrap();
    println!("{report}");
    for stage in Stage::ALL {
        assert!(p.manifest().is_complete(stage), "{stage}");
    }
    let mut reopened = Pipeline::open(dir.path(), PipelineConfig::default()).unwrap();
    assert!(reopened.verify().unwrap().is_empty());

    // Every stage artifact reads back through the module that wrote it.
    let posts = ingest(dir.path().join("corpus/posts.jsonl")).unwrap();
    assert_eq!(posts.records.len(), 200 - posts.rejections.len());
    assert!(posts.rejections.is_empty());
    let clean = reopened.clean_posts().unwrap();
    let chunks = reopened.chunks().unwrap();
    assert!(clean.len() <= posts.records.len() && chunks.len() >= clean.len());
    let index = reopened.annotated_index().unwrap();
    assert_eq!(index.len(), chunks.len());
    let model = reopened.cluster_model().unwrap();
    assert_eq!(model.cluster_sizes().iter().sum::<usize>(), chunks.len());
    assert_eq!(index.cluster_sizes().len(), model.k);
    let personas = reopened.personas().unwrap();
    assert_eq!(personas.len(), model.k);
    let transcript = Transcript::read(dir.path().join("simulation/transcript.jsonl")).unwrap();
    transcript.validate().unwrap();
    assert_eq!(transcript.personas, personas);
    let analysis = reopened.analysis().unwrap();
    assert_eq!(analysis.counts.agent_messages, transcript.agent_messages().count());
    for rel in [
        "clusters/k_selection.json",
        "personas/contexts.json",
        "personas/diversity_report.json",
        "validation/cross_validation.json",
        "validation/inter_persona.json",
    ] {
        let bytes = std::fs::read(dir.path().join(rel)).unwrap();
        serde_json::from_slice::<serde_json::Value>(&bytes).unwrap();
    }
    let report: CrossValidationReport =
        serde_json::from_slice(&std::fs::read(dir.path().join("validation/cross_validation.json")).unwrap()).unwrap();
    assert_eq!(report.groundings.len(), personas.iter().map(|p| p.attributes.len()).sum::<usize>());
    assert!(files(dir.path()).contains_key(MANIFEST_FILE));
}
