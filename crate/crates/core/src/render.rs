//! Static vector-graphic stills: selected frames rendered side by side with
//! bones as line segments, optionally overlaying an adversarial sequence in a
//! distinct stroke.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataio::write_atomic;
use crate::error::{Error, Result};
use crate::sequence::SkeletonSequence;
use crate::topology::SkeletonTopology;

const PANEL: f64 = 220.0;
const MARGIN: f64 = 16.0;

/// Deterministic 2D orthographic projection (x right, y up) of the chosen
/// frames. Identical inputs produce byte-identical SVG.
pub fn render_frames(
    seq: &SkeletonSequence,
    adv: Option<&SkeletonSequence>,
    topo: &SkeletonTopology,
    frames: &[usize],
    path: &Path,
) -> Result<()> {
    if seq.num_joints() != topo.num_joints() {
        return Err(Error::contract("sequence joint count does not match topology"));
    }
    if let Some(a) = adv {
        if !seq.same_shape(a) {
            return Err(Error::contract("adversarial overlay differs in shape"));
        }
    }
    if frames.is_empty() {
        return Err(Error::contract("no frame indices given"));
    }
    for &f in frames {
        if f >= seq.num_frames() {
            return Err(Error::contract(format!(
                "frame index {f} out of range 0..{}",
                seq.num_frames()
            )));
        }
    }

    // Shared bounding box over all drawn frames and both sequences.
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    let mut scan = |s: &SkeletonSequence| {
        for &f in frames {
            for j in 0..s.num_joints() {
                for a in 0..2 {
                    min[a] = min[a].min(s.coords()[[f, j, a]]);
                    max[a] = max[a].max(s.coords()[[f, j, a]]);
                }
            }
        }
    };
    scan(seq);
    if let Some(a) = adv {
        scan(a);
    }
    let span = (max[0] - min[0]).max(max[1] - min[1]).max(1e-9);
    let scale = (PANEL - 2.0 * MARGIN) / span;

    let width = PANEL * frames.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.1}\" height=\"{PANEL:.1}\" \
         viewBox=\"0 0 {width:.1} {PANEL:.1}\">"
    );
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");

    let project = |s: &SkeletonSequence, frame: usize, joint: usize, panel: usize| {
        let x = (s.coords()[[frame, joint, 0]] - min[0]) * scale + MARGIN + panel as f64 * PANEL;
        let y = PANEL - MARGIN - (s.coords()[[frame, joint, 1]] - min[1]) * scale;
        (x, y)
    };

    for (panel, &frame) in frames.iter().enumerate() {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"12\" font-size=\"10\" fill=\"#444\">frame {frame}</text>",
            panel as f64 * PANEL + 4.0
        );
        let mut draw = |s: &SkeletonSequence, stroke: &str, width: f64, dash: &str| {
            for bone in topo.bones() {
                let (x1, y1) = project(s, frame, bone.parent, panel);
                let (x2, y2) = project(s, frame, bone.child, panel);
                let _ = writeln!(
                    svg,
                    "<line x1=\"{x1:.4}\" y1=\"{y1:.4}\" x2=\"{x2:.4}\" y2=\"{y2:.4}\" \
                     stroke=\"{stroke}\" stroke-width=\"{width:.1}\"{dash}/>"
                );
            }
            for j in 0..s.num_joints() {
                let (x, y) = project(s, frame, j, panel);
                let _ = writeln!(
                    svg,
                    "<circle cx=\"{x:.4}\" cy=\"{y:.4}\" r=\"1.6\" fill=\"{stroke}\"/>"
                );
            }
        };
        draw(seq, "#1f77b4", 2.0, "");
        if let Some(a) = adv {
            draw(a, "#d62728", 1.2, " stroke-dasharray=\"3 2\"");
        }
    }
    let _ = writeln!(svg, "</svg>");
    write_atomic(path, svg.as_bytes())
}
