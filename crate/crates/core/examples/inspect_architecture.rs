//! Prints every layer table and the parameter budget of the two-branch graph.

use monoview::cli::inspect_report;
use monoview::ModelGraph;

fn main() -> monoview::Result<()> {
    let graph = ModelGraph::zeroed()?;
    print!("{}", inspect_report(&graph));
    let enc = graph.component("encoder")?;
    let lr = graph.branch(monoview::WarpDirection::LeftToRight);
    assert!(std::ptr::eq(enc, lr.encoder));
    println!("\nthe encoder is shared; each branch owns its decoder, refiner and merger");
    Ok(())
}
