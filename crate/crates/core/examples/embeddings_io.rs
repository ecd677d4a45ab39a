//! Writing and reading `EMB1` feature files, plus exhaustive neighbor search.

use std::collections::HashSet;

use hice::embeddings::{
    cosine_similarity, ids_sidecar_path, knn_scored, read_embeddings, write_embeddings, EmbeddingMatrix,
    Metric, Order,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ids: Vec<String> = ["cat", "dog", "car", "bus", "tree"].iter().map(|s| s.to_string()).collect();
    let rows = vec![
        vec![1.0, 0.9, 0.0],
        vec![0.9, 1.0, 0.1],
        vec![0.0, 0.1, 1.0],
        vec![0.1, 0.0, 0.9],
        vec![0.5, 0.5, 0.5],
    ];
    let m = EmbeddingMatrix::from_rows(ids, rows, "toy-encoder")?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("toy.emb");
    write_embeddings(&m, &path)?;
    let back = read_embeddings(&path)?.with_encoder_tag("toy-encoder");
    assert_eq!(back, m);
    println!(
        "round trip ok: {} rows x {} dims, {} bytes, sidecar {}",
        back.len(),
        back.dim(),
        std::fs::metadata(&path)?.len(),
        ids_sidecar_path(&path).file_name().unwrap().to_string_lossy()
    );

    let query = m.require("cat")?;
    let exclude = HashSet::from(["cat"]);
    for (order, label) in [(Order::Nearest, "nearest"), (Order::Farthest, "farthest")] {
        let hits = knn_scored(query, &m, 2, order, Metric::L2, &exclude)?;
        println!("{label:>8} to cat: {hits:?}");
    }
    println!(
        "cos(cat, dog) = {:.3}",
        cosine_similarity(m.require("cat")?, m.require("dog")?)?
    );
    Ok(())
}
