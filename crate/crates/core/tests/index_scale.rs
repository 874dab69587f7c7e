use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use persona_ecosystem::embedding::{Embedding, DEFAULT_DIMENSION};
use persona_ecosystem::index::{EntryMetadata, IndexEntry, MetadataFilter, VectorIndex};

/// Corpus-sized index: 41,300 chunks of 384 dimensions, snapshot round trip
/// and filtered queries.
#[test]
fn corpus_scale_index() {
    let n = 41_300;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let entries: Vec<IndexEntry> = (0..n)
        .map(|i| IndexEntry {
            entry_id: format!("p{i:05}#0"),
            vector: Embedding::normalized((0..DEFAULT_DIMENSION).map(|_| rng.random_range(-1.0..1.0)).collect(), "r")
                .unwrap(),
            metadata: EntryMetadata::new(format!("p{i:05}"), 0).with_cluster(i % 5),
        })
        .collect();
    let probe = entries[1234].clone();
    let index = VectorIndex::new(DEFAULT_DIMENSION);
    index.upsert(entries).unwrap();
    assert_eq!(index.len(), n);

    let start = Instant::now();
    let hits = index.query(&probe.vector, 10, None).unwrap();
    let filtered = index.query(&probe.vector, 10, Some(&MetadataFilter::cluster(1))).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(hits[0].entry_id, probe.entry_id);
    assert!((hits[0].score - 1.0).abs() < 1e-12);
    assert!(filtered.iter().all(|h| h.metadata.cluster_id == Some(1)));
    eprintln!("two exact queries over {n} entries: {elapsed:?}");

    let mut bytes = Vec::new();
    index.write_snapshot(&mut bytes).unwrap();
    let restored = VectorIndex::read_snapshot(bytes.as_slice()).unwrap();
    assert_eq!(restored.len(), n);
    assert_eq!(restored.query(&probe.vector, 10, None).unwrap(), hits);
}
