//! Prints the self-attention allow-matrices of every framework as 0/1 grids,
//! including the PF-free interval patterns at each boundary.
//!
//! ```bash
//! cargo run --example show_masks
//! ```

use dialab::layout::{
    build_framework_mask, build_layout, build_pf_interval_mask, LayoutBundle, Stream,
    ALL_FRAMEWORKS,
};

fn annotate(layout: &dialab::layout::SequenceLayout) -> String {
    layout
        .positions()
        .iter()
        .map(|p| match (p.stream, p.target_index) {
            (Stream::Source, _) => "s".to_string(),
            (Stream::TargetToken, Some(i)) => format!("y{i}"),
            (Stream::TargetMask, Some(i)) => format!("m{i}"),
            _ => "?".to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() {
    let (s, t) = (3usize, 4usize);
    println!("source length {s}, target length {t}\n");
    for fw in ALL_FRAMEWORKS {
        println!("== {} ({})", fw.label(), fw);
        match build_layout(fw, s, t, None).unwrap() {
            LayoutBundle::Single(layout) => {
                println!("positions: {}", annotate(&layout));
                let mask = build_framework_mask(&layout, fw).unwrap();
                print!("{}", mask.to_grid_string());
                if fw.uses_interval() {
                    let k = 3;
                    let mut b = k;
                    while b <= layout.target_len {
                        println!("interval k={k}, boundary b={b}:");
                        let m = build_pf_interval_mask(&layout, k, b).unwrap();
                        print!("{}", m.to_grid_string());
                        b += k;
                    }
                }
            }
            LayoutBundle::EncoderDecoder { encoder, decoder } => {
                println!("encoder ({} positions, all-allow):", encoder.len());
                print!(
                    "{}",
                    build_framework_mask(&encoder, fw).unwrap().to_grid_string()
                );
                println!("decoder ({} positions, causal):", decoder.len());
                print!(
                    "{}",
                    build_framework_mask(&decoder, fw).unwrap().to_grid_string()
                );
            }
        }
        println!();
    }
}
