//! Orthographic stick figures: forward kinematics per frame, viewed from the front (x right, z up).

use std::path::Path;

use anyhow::{ensure, Context, Result};
use dyadmotion_core::kinematics::forward_kinematics;
use dyadmotion_core::Skeleton;
use image::{Rgb, RgbImage};
use ndarray::Array2;

const BACKGROUND: Rgb<u8> = Rgb([250, 250, 250]);
const PANEL_COLOURS: [Rgb<u8>; 2] = [Rgb([30, 60, 160]), Rgb([170, 50, 30])];
const STRIP_HEIGHT: u32 = 48;

/// One column of the output: a motion track and optionally its face codes.
pub struct Panel {
    pub motion: Array2<f32>,
    pub face: Option<Array2<f32>>,
}

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    pub width: u32,
    pub height: u32,
    pub face_strip: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            width: 240,
            height: 320,
            face_strip: false,
        }
    }
}

/// Projected joint positions of every frame, in metres.
fn project(motion: &Array2<f32>, skeleton: &Skeleton) -> Result<Vec<Vec<[f32; 2]>>> {
    motion
        .rows()
        .into_iter()
        .map(|row| {
            let pose: Vec<f32> = row.to_vec();
            let joints = forward_kinematics(&pose, skeleton)?;
            Ok(joints.iter().map(|p| [p[0], p[2]]).collect())
        })
        .collect()
}

fn put(img: &mut RgbImage, x: i64, y: i64, colour: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, colour);
    }
}

/// One-pixel line by stepping along the longer axis.
fn draw_line(img: &mut RgbImage, a: (f32, f32), b: (f32, f32), colour: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let s = i as f32 / steps as f32;
        put(img, (a.0 + s * (b.0 - a.0)).round() as i64, (a.1 + s * (b.1 - a.1)).round() as i64, colour);
    }
}

fn fill_circle(img: &mut RgbImage, c: (f32, f32), r: i64, colour: Rgb<u8>) {
    let (cx, cy) = (c.0.round() as i64, c.1.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, cx + dx, cy + dy, colour);
            }
        }
    }
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, colour: Rgb<u8>) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            put(img, x as i64, y as i64, colour);
        }
    }
}

struct View {
    min: [f32; 2],
    scale: f32,
    offset: [f32; 2],
}

impl View {
    /// Shared framing so every panel and frame uses the same scale.
    fn fit(frames: &[&Vec<Vec<[f32; 2]>>], width: u32, height: u32) -> Self {
        let mut min = [f32::INFINITY; 2];
        let mut max = [f32::NEG_INFINITY; 2];
        for p in frames.iter().flat_map(|f| f.iter()).flatten() {
            for a in 0..2 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let span = [(max[0] - min[0]).max(1e-3), (max[1] - min[1]).max(1e-3)];
        let margin = 0.9;
        let scale = margin * (width as f32 / span[0]).min(height as f32 / span[1]);
        let offset = [
            0.5 * (width as f32 - scale * span[0]),
            0.5 * (height as f32 - scale * span[1]),
        ];
        Self { min, scale, offset }
    }

    fn pixel(&self, p: [f32; 2], height: u32) -> (f32, f32) {
        let x = self.offset[0] + self.scale * (p[0] - self.min[0]);
        let y = height as f32 - (self.offset[1] + self.scale * (p[1] - self.min[1]));
        (x, y)
    }
}

fn draw_figure(img: &mut RgbImage, x0: u32, joints: &[[f32; 2]], skeleton: &Skeleton, view: &View, height: u32, colour: Rgb<u8>) {
    let shift = |(x, y): (f32, f32)| (x + x0 as f32, y);
    for (j, joint) in skeleton.joints().iter().enumerate() {
        if let Some(parent) = joint.parent {
            let a = shift(view.pixel(joints[parent], height));
            let b = shift(view.pixel(joints[j], height));
            draw_line(img, a, b, colour);
        }
    }
    let head = shift(view.pixel(joints[skeleton.joint_index("head").unwrap_or(joints.len() - 1)], height));
    fill_circle(img, head, 6, colour);
}

/// Face-code magnitude over the whole track with a cursor at `frame`.
fn draw_strip(img: &mut RgbImage, x0: u32, y0: u32, width: u32, norms: &[f32], frame: usize, colour: Rgb<u8>) {
    fill_rect(img, x0, y0, width, STRIP_HEIGHT, Rgb([235, 235, 235]));
    if norms.is_empty() {
        return;
    }
    let top = norms.iter().cloned().fold(0.0f32, f32::max).max(1e-6);
    let n = norms.len();
    let point = |t: usize| {
        let x = x0 as f32 + (width - 1) as f32 * t as f32 / (n.max(2) - 1) as f32;
        let y = (y0 + STRIP_HEIGHT - 2) as f32 - (STRIP_HEIGHT - 4) as f32 * norms[t] / top;
        (x, y)
    };
    for t in 1..n {
        draw_line(img, point(t - 1), point(t), colour);
    }
    let (cx, _) = point(frame.min(n - 1));
    draw_line(img, (cx, y0 as f32), (cx, (y0 + STRIP_HEIGHT) as f32), Rgb([0, 0, 0]));
}

/// Renders one frame image per motion frame, side by side when there are two panels. Returns the
/// number of frames written as `frame_NNNNN.png` under `out`.
pub fn render_frames(panels: &[Panel], skeleton: &Skeleton, options: RenderOptions, out: &Path) -> Result<usize> {
    ensure!(!panels.is_empty() && panels.len() <= 2, "render one panel, or two side by side");
    // Side-by-side tracks of different lengths are shown over their common prefix.
    let frames = panels.iter().map(|p| p.motion.nrows()).min().unwrap_or(0);
    if panels.iter().any(|p| p.motion.nrows() != frames) {
        log::warn!("panels differ in length; rendering the first {frames} frames");
    }
    ensure!(frames > 0, "nothing to render: the motion track is empty");
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let projected: Vec<_> = panels.iter().map(|p| project(&p.motion, skeleton)).collect::<Result<_>>()?;
    let view = View::fit(&projected.iter().collect::<Vec<_>>(), options.width, options.height);
    let norms: Vec<Option<Vec<f32>>> = panels
        .iter()
        .map(|p| p.face.as_ref().map(|f| f.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()))
        .collect();
    let strip = options.face_strip && norms.iter().any(Option::is_some);
    let total_height = options.height + if strip { STRIP_HEIGHT } else { 0 };
    for t in 0..frames {
        let mut img = RgbImage::from_pixel(options.width * panels.len() as u32, total_height, BACKGROUND);
        for (i, joints) in projected.iter().enumerate() {
            let x0 = options.width * i as u32;
            draw_figure(&mut img, x0, &joints[t], skeleton, &view, options.height, PANEL_COLOURS[i]);
            if let (true, Some(n)) = (strip, &norms[i]) {
                draw_strip(&mut img, x0, options.height, options.width, n, t, PANEL_COLOURS[i]);
            }
        }
        let path = out.join(format!("frame_{t:05}.png"));
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(frames)
}
