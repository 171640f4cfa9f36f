use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use super::spec::{PhantomSpec, Structure, TumorLocation};
use crate::error::{Error, Result};
use crate::model::{Phase, PhaseImages};
use crate::volume::{seg, ta, ClassTable, LabelMap, VoxelGrid};

const CENTRELINE_SAMPLES: usize = 64;
const TUMOR_RETRIES: usize = 32;
const ORGAN_RETRIES: usize = 64;

/// One synthetic patient: aligned phase images and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub case_id: String,
    pub images: PhaseImages,
    /// Over `ClassTable::seg3`; vessel voxels are background.
    pub truth_seg: LabelMap,
    /// Over `ClassTable::ta6`; tumor voxels count as pancreas.
    pub truth_ta: LabelMap,
    /// Whether the tumor used the hyper-enhancing intensity row.
    pub hyper_enhancing: bool,
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dist_to_segment(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    let d = sub(p, q);
    dot(d, d).sqrt()
}

/// A tube of constant radius around a polyline.
struct Tube {
    points: Vec<Vec3>,
    radius: f64,
}

impl Tube {
    fn contains(&self, p: Vec3) -> bool {
        self.points
            .windows(2)
            .any(|w| dist_to_segment(p, w[0], w[1]) <= self.radius)
    }
}

/// Pancreas as a chain of ellipsoids along a bent centreline.
struct Pancreas {
    centre: Vec<Vec3>,
    radius: Vec<f64>,
    z_scale: f64,
}

impl Pancreas {
    fn at(&self, t: f64) -> (Vec3, f64) {
        let i = ((t.clamp(0.0, 1.0)) * (self.centre.len() - 1) as f64).round() as usize;
        (self.centre[i], self.radius[i])
    }

    fn contains(&self, p: Vec3) -> bool {
        self.centre.iter().zip(&self.radius).any(|(c, &r)| {
            let d = sub(p, *c);
            let rz = r * self.z_scale;
            (d[0] * d[0] + d[1] * d[1]) / (r * r) + d[2] * d[2] / (rz * rz) <= 1.0
        })
    }

    /// Euclidean gap from `p` to the nearest centreline ellipsoid surface,
    /// approximated with the in-plane radius.
    fn clearance(&self, p: Vec3) -> f64 {
        self.centre
            .iter()
            .zip(&self.radius)
            .map(|(c, &r)| dot(sub(p, *c), sub(p, *c)).sqrt() - r * self.z_scale)
            .fold(f64::INFINITY, f64::min)
    }
}

struct Tumor {
    centre: Vec3,
    radius: f64,
    lobes: [(Vec3, f64); 3],
    irregularity: f64,
}

impl Tumor {
    fn contains(&self, p: Vec3) -> bool {
        let d = sub(p, self.centre);
        let rho = dot(d, d).sqrt();
        if rho == 0.0 {
            return true;
        }
        let u = [d[0] / rho, d[1] / rho, d[2] / rho];
        let bump: f64 = self.lobes.iter().map(|(v, a)| a * dot(u, *v)).sum();
        rho <= self.radius * (1.0 + self.irregularity * bump)
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn jitter(rng: &mut ChaCha8Rng, amp: f64) -> f64 {
    if amp > 0.0 {
        rng.random_range(-amp..amp)
    } else {
        0.0
    }
}

fn random_direction(rng: &mut ChaCha8Rng) -> Vec3 {
    UnitSphere.sample(rng)
}

fn build_pancreas(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Pancreas {
    let p = &spec.pancreas;
    let c = [
        p.center_mm[0] + jitter(rng, p.center_jitter_mm),
        p.center_mm[1] + jitter(rng, p.center_jitter_mm),
        p.center_mm[2] + jitter(rng, p.center_jitter_mm),
    ];
    let length = p.length_mm * (1.0 + jitter(rng, p.length_jitter));
    let bend = p.bend_mm * rng.random_range(0.5..1.0);
    let tilt = jitter(rng, 6.0);
    let n = CENTRELINE_SAMPLES;
    let mut centre = Vec::with_capacity(n);
    let mut radius = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        centre.push([
            c[0] - length / 2.0 + t * length,
            c[1] + bend * (std::f64::consts::PI * t).sin() - bend / 2.0,
            c[2] + tilt * (t - 0.5),
        ]);
        radius.push(p.tail_radius_mm + (p.head_radius_mm - p.tail_radius_mm) * (1.0 - t).powf(1.5));
    }
    Pancreas {
        centre,
        radius,
        z_scale: p.z_scale,
    }
}

fn build_vessels(spec: &PhantomSpec, pancreas: &Pancreas, rng: &mut ChaCha8Rng) -> [Tube; 4] {
    let v = &spec.vessels;
    let j = v.jitter_mm;
    let jit = |rng: &mut ChaCha8Rng| [jitter(rng, j), jitter(rng, j), jitter(rng, j)];
    let add = |a: Vec3, b: Vec3| [a[0] + b[0], a[1] + b[1], a[2] + b[2]];

    // Portal/splenic vein: along the dorsal surface from neck to tail.
    let offset = jit(rng);
    let psv_points = (0..=8)
        .map(|i| {
            let t = 0.2 + 0.8 * i as f64 / 8.0;
            let (c, r) = pancreas.at(t);
            add(
                c,
                [
                    offset[0],
                    r * 0.8 + v.portal_splenic_radius_mm + offset[1],
                    offset[2],
                ],
            )
        })
        .collect();

    // SMV rises through the neck notch and joins the portal vein.
    let (neck, neck_r) = pancreas.at(0.28);
    let o = jit(rng);
    let smv = vec![
        add(neck, [o[0], neck_r * 0.6 + o[1], -30.0]),
        add(neck, [o[0], neck_r * 0.6 + o[1], neck_r * 0.5]),
        add(
            neck,
            [
                o[0],
                neck_r * 0.8 + v.portal_splenic_radius_mm,
                neck_r * 0.8,
            ],
        ),
    ];

    // SMA runs parallel, dorsal and slightly to the tail side of the SMV.
    let o = jit(rng);
    let sma = vec![
        add(
            neck,
            [7.0 + o[0], neck_r + v.sma_radius_mm + 3.0 + o[1], -30.0],
        ),
        add(
            neck,
            [7.0 + o[0], neck_r + v.sma_radius_mm + 3.0 + o[1], 18.0],
        ),
    ];

    // Coeliac trunk: a short branch above the body.
    let (body, body_r) = pancreas.at(0.45);
    let o = jit(rng);
    let rz = body_r * pancreas.z_scale;
    let truncus = vec![
        add(body, [o[0], body_r + 6.0 + o[1], rz + 2.0 + o[2]]),
        add(
            body,
            [
                8.0 + o[0],
                body_r * 0.2 + o[1],
                rz + v.truncus_radius_mm + o[2],
            ],
        ),
    ];

    [
        Tube {
            points: psv_points,
            radius: v.portal_splenic_radius_mm,
        },
        Tube {
            points: smv,
            radius: v.smv_radius_mm,
        },
        Tube {
            points: sma,
            radius: v.sma_radius_mm,
        },
        Tube {
            points: truncus,
            radius: v.truncus_radius_mm,
        },
    ]
}

fn build_tumor(spec: &PhantomSpec, pancreas: &Pancreas, rng: &mut ChaCha8Rng) -> Tumor {
    let t_range = match spec.tumor.location {
        TumorLocation::Head => [0.04, 0.3],
        TumorLocation::Anywhere => [0.04, 0.92],
    };
    let t = uniform(rng, t_range);
    let (c, r) = pancreas.at(t);
    let off = random_direction(rng);
    let reach = 0.35 * r * rng.random_range(0.0..1.0);
    let centre = [
        c[0] + off[0] * reach,
        c[1] + off[1] * reach,
        c[2] + off[2] * reach,
    ];
    let lobes = [0, 1, 2].map(|_| (random_direction(rng), rng.random_range(-1.0..1.0)));
    Tumor {
        centre,
        radius: uniform(rng, spec.tumor.radius_mm),
        lobes,
        irregularity: spec.tumor.irregularity,
    }
}

/// Voxel-centre coordinates in millimetres.
fn voxel_centres(spec: &PhantomSpec) -> Vec<Vec3> {
    let [nx, ny, nz] = spec.dims;
    let s = spec.spacing_mm;
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out.push([
                    (x as f64 + 0.5) * s[0],
                    (y as f64 + 0.5) * s[1],
                    (z as f64 + 0.5) * s[2],
                ]);
            }
        }
    }
    out
}

/// Draws one case. Deterministic in `(spec, case_seed)`.
pub fn generate_case(spec: &PhantomSpec, case_seed: u64) -> Result<PhantomCase> {
    generate_named(spec, case_seed, format!("case{case_seed}"))
}

pub(crate) fn generate_named(
    spec: &PhantomSpec,
    case_seed: u64,
    case_id: String,
) -> Result<PhantomCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed ^ mix(case_seed)));
    let centres = voxel_centres(spec);
    let n = centres.len();

    let pancreas = build_pancreas(spec, &mut rng);
    let in_pancreas: Vec<bool> = centres.iter().map(|&p| pancreas.contains(p)).collect();

    let mut tumor_mask = None;
    for _ in 0..TUMOR_RETRIES {
        let tumor = build_tumor(spec, &pancreas, &mut rng);
        let mask: Vec<bool> = centres.iter().map(|&p| tumor.contains(p)).collect();
        let overlap = mask.iter().zip(&in_pancreas).any(|(&t, &p)| t && p);
        if overlap {
            tumor_mask = Some(mask);
            break;
        }
    }
    let in_tumor = tumor_mask.ok_or_else(|| Error::Generation {
        case_seed,
        reason: format!("tumor could not be placed over the pancreas in {TUMOR_RETRIES} attempts"),
    })?;
    let hyper = rng.random_bool(spec.tumor.hyper_enhancing_prob);
    let contrast_scale = 1.0 + jitter(&mut rng, spec.tumor.contrast_jitter);

    let duct = rng.random_bool(spec.duct.probability).then(|| {
        let radius = uniform(&mut rng, spec.duct.radius_mm);
        let shift = jitter(&mut rng, 1.0);
        let points = (0..=10)
            .map(|i| {
                let (c, _) = pancreas.at(0.08 + 0.84 * i as f64 / 10.0);
                [c[0], c[1] + shift, c[2]]
            })
            .collect();
        Tube { points, radius }
    });

    let vessels = build_vessels(spec, &pancreas, &mut rng);

    let extent = [
        spec.dims[0] as f64 * spec.spacing_mm[0],
        spec.dims[1] as f64 * spec.spacing_mm[1],
        spec.dims[2] as f64 * spec.spacing_mm[2],
    ];
    let mut organs: Vec<(Vec3, Vec3)> = Vec::new();
    for _ in 0..spec.organs.count {
        for _ in 0..ORGAN_RETRIES {
            let r = uniform(&mut rng, spec.organs.radius_mm);
            let radii = [
                r,
                r * rng.random_range(0.7..1.3),
                r * rng.random_range(0.9..1.6),
            ];
            let c = [
                rng.random_range(0.0..extent[0]),
                rng.random_range(0.0..extent[1]),
                rng.random_range(0.0..extent[2]),
            ];
            let max_r = radii.iter().copied().fold(0.0, f64::max);
            if pancreas.clearance(c) > max_r + spec.organs.gap_mm
                && vessels.iter().all(|v| {
                    v.points
                        .windows(2)
                        .all(|w| dist_to_segment(c, w[0], w[1]) > max_r + v.radius)
                })
            {
                organs.push((c, radii));
                break;
            }
        }
    }

    // Structure per voxel, highest priority first.
    let mut structure = vec![Structure::Background; n];
    for (v, &p) in centres.iter().enumerate() {
        structure[v] = if in_tumor[v] {
            if hyper {
                Structure::TumorHyper
            } else {
                Structure::Tumor
            }
        } else if let Some(k) = vessels.iter().position(|t| t.contains(p)) {
            Structure::VESSELS[k]
        } else if in_pancreas[v] && duct.as_ref().is_some_and(|d| d.contains(p)) {
            Structure::Duct
        } else if in_pancreas[v] {
            Structure::Pancreas
        } else if organs.iter().any(|(c, r)| {
            let d = sub(p, *c);
            (d[0] / r[0]).powi(2) + (d[1] / r[1]).powi(2) + (d[2] / r[2]).powi(2) <= 1.0
        }) {
            Structure::Organ
        } else {
            Structure::Background
        };
    }

    let table = &spec.enhancement;
    let intensity = |s: Structure, phase: Phase| -> f64 {
        match s {
            Structure::Tumor | Structure::TumorHyper => {
                let base = table.mean(Structure::Pancreas, phase);
                base + (table.mean(s, phase) - base) * contrast_scale
            }
            other => table.mean(other, phase),
        }
    };
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut images = PhaseImages::new();
    for phase in Phase::ALL {
        let data: Vec<f32> = structure
            .iter()
            .map(|&s| {
                let mean = intensity(s, phase);
                let eps = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                (mean + eps) as f32
            })
            .collect();
        images.insert(phase, VoxelGrid::new(spec.dims, spec.spacing_mm, data)?);
    }

    let seg_data = structure
        .iter()
        .map(|s| match s {
            Structure::Tumor | Structure::TumorHyper => seg::TUMOR,
            Structure::Pancreas | Structure::Duct => seg::PANCREAS,
            _ => 0,
        })
        .collect();
    let ta_data = structure
        .iter()
        .map(|s| match s {
            Structure::Tumor | Structure::TumorHyper | Structure::Pancreas | Structure::Duct => {
                ta::PANCREAS
            }
            Structure::PortalSplenicVein => ta::PORTAL_SPLENIC_VEIN,
            Structure::Smv => ta::SMV,
            Structure::Sma => ta::SMA,
            Structure::TruncusCoeliacus => ta::TRUNCUS_COELIACUS,
            Structure::Background | Structure::Organ => 0,
        })
        .collect();
    let truth_seg = LabelMap::new(
        VoxelGrid::new(spec.dims, spec.spacing_mm, seg_data)?,
        ClassTable::seg3(),
    )?;
    let truth_ta = LabelMap::new(
        VoxelGrid::new(spec.dims, spec.spacing_mm, ta_data)?,
        ClassTable::ta6(),
    )?;
    Ok(PhantomCase {
        case_id,
        images,
        truth_seg,
        truth_ta,
        hyper_enhancing: hyper,
    })
}
