//! Text and SVG renderings of heap snapshots.

use std::fmt::Write as _;

use crate::alloc::{Block, BlockState, Region};

/// Widest SVG strip in pixels.
pub const SVG_MAX_WIDTH: u64 = 4096;
const SVG_HEIGHT: u64 = 32;
/// Room reserved for the elision marker when a strip is truncated.
const ELISION_WIDTH: u64 = 24;

fn code(state: &BlockState) -> String {
    match state {
        BlockState::Free => "F".into(),
        BlockState::Allocated { .. } => "A".into(),
        BlockState::Run { class_size, .. } => format!("R{class_size}"),
    }
}

/// One bracketed cell per block, e.g. `[A:32][F:96]`; runs show their
/// class as `[R16:4096]` and mapped blocks follow a ` | ` separator.
pub fn ascii(blocks: &[Block]) -> String {
    let mut out = String::new();
    let mut mapped = false;
    for b in blocks {
        if b.region == Region::Mapped && !mapped {
            mapped = true;
            if !out.is_empty() {
                out.push_str(" | ");
            }
        }
        write!(out, "[{}:{}]", code(&b.state), b.footprint).unwrap();
    }
    out
}

fn fill(state: &BlockState) -> &'static str {
    match state {
        BlockState::Free => "#8fd18f",
        BlockState::Allocated { .. } => "#e0796b",
        BlockState::Run { .. } => "#7ba7d9",
    }
}

/// A strip of rectangles in offset order at one pixel per `alignment`
/// bytes. Strips wider than [`SVG_MAX_WIDTH`] are cut short and end in an
/// elision marker.
pub fn svg(blocks: &[Block], alignment: u64) -> String {
    let alignment = alignment.max(1);
    let widths: Vec<u64> = blocks
        .iter()
        .map(|b| (b.footprint / alignment).max(1))
        .collect();
    let total: u64 = widths.iter().sum();
    let elided = total > SVG_MAX_WIDTH;
    let limit = if elided {
        SVG_MAX_WIDTH - ELISION_WIDTH
    } else {
        total
    };
    let width = if elided { SVG_MAX_WIDTH } else { total.max(1) };

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{SVG_HEIGHT}" viewBox="0 0 {width} {SVG_HEIGHT}">"#
    )
    .unwrap();
    let mut x = 0;
    for (b, &w) in blocks.iter().zip(&widths) {
        if x >= limit {
            break;
        }
        let w = w.min(limit - x);
        writeln!(
            out,
            r##"  <rect x="{x}" y="0" width="{w}" height="{SVG_HEIGHT}" fill="{}" stroke="#333" stroke-width="0.5"><title>{} {} @{}</title></rect>"##,
            fill(&b.state),
            code(&b.state),
            b.footprint,
            b.offset
        )
        .unwrap();
        x += w;
    }
    if elided {
        writeln!(
            out,
            r##"  <text x="{}" y="{}" font-family="monospace" font-size="16" text-anchor="middle">&#8230;</text>"##,
            limit + ELISION_WIDTH / 2,
            SVG_HEIGHT / 2 + 5
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}
