//! The two class-score rules for a query embedding: the default softmax over
//! negative squared distances, and the raw distance ratio selected with
//! `literal_scores`. The ratio grows with distance, so it ranks the farthest
//! prototype first; it exists for ablations only.
//!
//! ```text
//! cargo run --release --example score_variants
//! ```

use ulda::model::{classify_query, distance_ratio_scores, squared_distance};

fn main() -> ulda::Result<()> {
    let prototypes = vec![
        vec![0.0f32, 0.0],
        vec![3.0, 0.0],
        vec![0.0, 4.0],
        vec![-2.0, -2.0],
    ];
    for query in [[0.2f32, 0.1], [1.4, 0.0], [-1.0, -1.2]] {
        let softmax = classify_query(&query, &prototypes)?;
        let ratio = distance_ratio_scores(&query, &prototypes)?;
        println!("query {query:?}");
        for (k, p) in prototypes.iter().enumerate() {
            println!(
                "  class {k}: d² {:>6.2}  softmax {:.3}  ratio {:.3}",
                squared_distance(&query, p),
                softmax[k],
                ratio[k]
            );
        }
    }
    Ok(())
}
