//! Per-tile attention score export for heatmap rendering.
//!
//! A tile's score is the product of its chunk token's global attention
//! weight and its own local weight within the chunk, a normalized
//! distribution over the bag.

use std::io::Write;

use crate::data::TileBag;
use crate::engine::{forward_train, ModelParams, Structure};
use crate::error::Result;
use crate::hilbert::{order_bag, OrderStrategy};
use crate::tensor::Tape;
use crate::train::gather_rows;

#[derive(Debug, Clone, Copy)]
pub struct TileScore {
    /// Index of the tile within its bag.
    pub tile: usize,
    pub x: i64,
    pub y: i64,
    pub score: f64,
}

pub fn export_attention(
    params: &ModelParams,
    bag: &TileBag,
    strategy: OrderStrategy,
) -> Result<Vec<TileScore>> {
    let order = order_bag(bag, strategy)?;
    let x = gather_rows(&bag.features, &order.perm);
    let mut tape = Tape::new(false);
    let vars = params.bind(&mut tape);
    let fwd = forward_train(&mut tape, &vars, &x)?;
    let global_w = tape.value(fwd.global_weights).data().to_vec();

    let mut scores = Vec::with_capacity(bag.num_tiles());
    if params.structure == Structure::GlobalOnly {
        // No local stage: the global weights are already per tile.
        for (pos, &tile) in order.perm.iter().enumerate() {
            let (cx, cy) = bag.coords[tile];
            scores.push(TileScore { tile, x: cx, y: cy, score: global_w[pos] });
        }
        return Ok(scores);
    }

    let l = params.dims.chunk_len;
    for (k, weights) in fwd.local_weights.iter().enumerate() {
        let local_w = tape.value(*weights).data();
        for j in 0..fwd.chunk_valid[k] {
            let tile = order.perm[k * l + j];
            let (cx, cy) = bag.coords[tile];
            scores.push(TileScore { tile, x: cx, y: cy, score: global_w[k] * local_w[j] });
        }
    }
    Ok(scores)
}

pub fn write_scores_csv(w: &mut impl Write, scores: &[TileScore]) -> Result<()> {
    writeln!(w, "x,y,score")?;
    for s in scores {
        writeln!(w, "{},{},{}", s.x, s.y, s.score)?;
    }
    Ok(())
}
