//! The deterministic feature-hashing embedder.

use memtune::embedding::{cosine, hash_embed};

fn main() {
    let texts = [
        "Melanie went camping at the beach",
        "camping at the beach with Melanie",
        "Caroline joined a pottery class",
        "",
    ];
    let vectors: Vec<Vec<f64>> = texts.iter().map(|t| hash_embed(t)).collect();
    for (t, v) in texts.iter().zip(&vectors) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("{t:?}: dim {} norm {norm:.6}", v.len());
    }
    println!(
        "cos(0, 1) = {:.4}",
        cosine(&vectors[0], &vectors[1]).unwrap()
    );
    println!(
        "cos(0, 2) = {:.4}",
        cosine(&vectors[0], &vectors[2]).unwrap()
    );
    println!(
        "cos(0, empty) = {:.4}",
        cosine(&vectors[0], &vectors[3]).unwrap()
    );
}
