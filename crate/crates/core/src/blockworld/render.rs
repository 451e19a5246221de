//! Flat-shaded top-down rasterizer. Surfaces are painted in order of
//! height, so RGB shows the highest surface and depth is its height.

use super::{EnvState, Shape, BLOCK_HEIGHT};

pub const IMG_SIZE: usize = 32;
pub const IMG_CHANNELS: usize = 3;

const TABLE: [f32; 3] = [0.55, 0.5, 0.42];
const GOAL: [f32; 3] = [0.95, 0.95, 0.95];
const DRAWER_BODY: [f32; 3] = [0.45, 0.3, 0.15];
const DRAWER_TRAY: [f32; 3] = [0.7, 0.55, 0.35];
const HANDLE: [f32; 3] = [0.2, 0.2, 0.2];
const BUTTON_BASE: [f32; 3] = [0.35, 0.35, 0.35];
const BUTTON_TOP: [f32; 3] = [0.85, 0.2, 0.7];
const BUTTON_DOWN: [f32; 3] = [0.4, 0.1, 0.35];
const GRIPPER_OPEN: [f32; 3] = [1.0, 1.0, 1.0];
const GRIPPER_CLOSED: [f32; 3] = [0.1, 0.9, 0.9];

const BLOCK_HALF: f64 = 0.05;

#[derive(Clone, Copy)]
enum Region {
    Rect { x0: f64, x1: f64, y0: f64, y1: f64 },
    Disk { c: [f64; 2], r: f64 },
    Ring { c: [f64; 2], r0: f64, r1: f64 },
    Cross { c: [f64; 2], arm: f64, width: f64 },
}

impl Region {
    fn square(c: [f64; 2], half: f64) -> Self {
        Region::Rect {
            x0: c[0] - half,
            x1: c[0] + half,
            y0: c[1] - half,
            y1: c[1] + half,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Region::Rect { x0, x1, y0, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Region::Disk { c, r } => (x - c[0]).powi(2) + (y - c[1]).powi(2) <= r * r,
            Region::Ring { c, r0, r1 } => {
                let dx = (x - c[0]).abs();
                let dy = (y - c[1]).abs();
                let m = dx.max(dy);
                m >= r0 && m <= r1
            }
            Region::Cross { c, arm, width } => {
                let dx = (x - c[0]).abs();
                let dy = (y - c[1]).abs();
                (dx <= arm && dy <= width) || (dy <= arm && dx <= width)
            }
        }
    }
}

struct Surface {
    height: f64,
    rgb: [f32; 3],
    region: Region,
}

fn surfaces(s: &EnvState) -> Vec<Surface> {
    let mut v = Vec::new();
    if let Some(g) = s.goal {
        v.push(Surface {
            height: 0.0,
            rgb: GOAL,
            region: Region::Ring {
                c: g,
                r0: 0.035,
                r1: 0.06,
            },
        });
    }
    for o in &s.objects {
        match o.shape {
            Shape::Block => {
                let height = if o.held { s.pose[2].max(BLOCK_HEIGHT) } else { BLOCK_HEIGHT };
                v.push(Surface {
                    height,
                    rgb: o.color.rgb(),
                    region: Region::square(o.pos, BLOCK_HALF),
                });
            }
            Shape::Button => {
                v.push(Surface {
                    height: 0.03,
                    rgb: BUTTON_BASE,
                    region: Region::Disk { c: o.pos, r: 0.06 },
                });
                v.push(Surface {
                    height: if o.pressed { 0.035 } else { 0.05 },
                    rgb: if o.pressed { BUTTON_DOWN } else { BUTTON_TOP },
                    region: Region::Disk { c: o.pos, r: 0.035 },
                });
            }
            Shape::Drawer => {
                v.push(Surface {
                    height: 0.15,
                    rgb: DRAWER_BODY,
                    region: Region::Rect {
                        x0: o.origin[0] - 0.1,
                        x1: o.origin[0] + 0.1,
                        y0: o.origin[1],
                        y1: o.origin[1] + 0.12,
                    },
                });
                if o.drawer_opening() > 0.0 {
                    v.push(Surface {
                        height: 0.12,
                        rgb: DRAWER_TRAY,
                        region: Region::Rect {
                            x0: o.origin[0] - 0.09,
                            x1: o.origin[0] + 0.09,
                            y0: o.pos[1],
                            y1: o.origin[1],
                        },
                    });
                }
                v.push(Surface {
                    height: 0.16,
                    rgb: HANDLE,
                    region: Region::square(o.pos, 0.025),
                });
            }
        }
    }
    let z = s.pose[2];
    let shade = (0.55 + 0.45 * z) as f32;
    let base = if s.pose[3] >= 0.5 { GRIPPER_CLOSED } else { GRIPPER_OPEN };
    v.push(Surface {
        height: z + 0.01,
        rgb: base.map(|c| c * shade),
        region: Region::Cross {
            c: [s.pose[0], s.pose[1]],
            arm: 0.047,
            width: 0.016,
        },
    });
    // stable: equal heights keep insertion order
    v.sort_by(|a, b| a.height.total_cmp(&b.height));
    v
}

fn rasterize(s: &EnvState) -> (Vec<f32>, Vec<f32>) {
    let n = IMG_SIZE;
    let mut rgb = vec![0.0f32; n * n * IMG_CHANNELS];
    let mut depth = vec![0.0f32; n * n];
    for px in rgb.chunks_exact_mut(3) {
        px.copy_from_slice(&TABLE);
    }
    for surf in surfaces(s) {
        for py in 0..n {
            let y = (py as f64 + 0.5) / n as f64;
            for px in 0..n {
                let x = (px as f64 + 0.5) / n as f64;
                if surf.region.contains(x, y) {
                    let i = py * n + px;
                    rgb[i * 3..i * 3 + 3].copy_from_slice(&surf.rgb);
                    depth[i] = surf.height.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    (rgb, depth)
}

/// `IMG_SIZE x IMG_SIZE x 3` RGB in `[0, 1]`, row-major with `y` down rows.
pub fn render_rgb(s: &EnvState) -> Vec<f32> {
    rasterize(s).0
}

/// Height of the visible surface per pixel, in `[0, 1]`.
pub fn render_depth(s: &EnvState) -> Vec<f32> {
    rasterize(s).1
}
