//! Seeded point clouds sampled on primitive surfaces, with two geometric
//! parts per shape.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classification,
    PartSegmentation,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "cls",
            Task::PartSegmentation => "seg",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" | "classification" => Ok(Task::Classification),
            "seg" | "part_segmentation" => Ok(Task::PartSegmentation),
            _ => Err(Error::Config(format!("unknown task {s:?} (expected cls or seg)"))),
        }
    }
}

/// Part 0 / part 1 of each shape:
/// sphere north/south, cube ±z faces/sides, cylinder caps/body,
/// torus outer/inner half.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Torus];
    pub const PARTS: usize = 2;

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
            Shape::Torus => "torus",
        }
    }

    /// Sample `n` points with outward unit normals and local part labels.
    pub fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> (Vec<Point>, Vec<Point>, Vec<usize>) {
        let mut coords = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        match self {
            Shape::Sphere => {
                for _ in 0..n {
                    let p = unit_vector(rng);
                    coords.push(p);
                    normals.push(p);
                    labels.push(usize::from(p[2] < 0.0));
                }
            }
            Shape::Cube => {
                let half: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));
                // face pairs weighted by area: x faces have area 4*hy*hz, ...
                let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = areas.iter().sum();
                for _ in 0..n {
                    let u = rng.random_range(0.0..total);
                    let axis = if u < areas[0] {
                        0
                    } else if u < areas[0] + areas[1] {
                        1
                    } else {
                        2
                    };
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let mut p: Point = std::array::from_fn(|i| rng.random_range(-half[i]..half[i]));
                    p[axis] = sign * half[axis];
                    let mut nrm = [0.0; 3];
                    nrm[axis] = sign;
                    coords.push(p);
                    normals.push(nrm);
                    labels.push(usize::from(axis != 2));
                }
            }
            Shape::Cylinder => {
                let radius = rng.random_range(0.4..0.6);
                let half_height = rng.random_range(0.4..0.6);
                let cap_area = 2.0 * PI * radius * radius;
                let side_area = 2.0 * PI * radius * 2.0 * half_height;
                for _ in 0..n {
                    if rng.random_range(0.0..cap_area + side_area) < cap_area {
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        let r = radius * rng.random::<f64>().sqrt();
                        let t = rng.random_range(0.0..2.0 * PI);
                        coords.push([r * t.cos(), r * t.sin(), sign * half_height]);
                        normals.push([0.0, 0.0, sign]);
                        labels.push(0);
                    } else {
                        let t = rng.random_range(0.0..2.0 * PI);
                        let z = rng.random_range(-half_height..half_height);
                        coords.push([radius * t.cos(), radius * t.sin(), z]);
                        normals.push([t.cos(), t.sin(), 0.0]);
                        labels.push(1);
                    }
                }
            }
            Shape::Torus => {
                let major = rng.random_range(0.6..0.8);
                let minor = rng.random_range(0.2..0.3);
                while coords.len() < n {
                    let u = rng.random_range(0.0..2.0 * PI);
                    let v = rng.random_range(0.0..2.0 * PI);
                    // area element is proportional to major + minor*cos(v)
                    if rng.random_range(0.0..major + minor) > major + minor * v.cos() {
                        continue;
                    }
                    let ring = major + minor * v.cos();
                    coords.push([ring * u.cos(), ring * u.sin(), minor * v.sin()]);
                    normals.push([v.cos() * u.cos(), v.cos() * u.sin(), v.sin()]);
                    labels.push(usize::from(v.cos() < 0.0));
                }
            }
        }
        (coords, normals, labels)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|sh| sh.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape {s:?}")))
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = std::array::from_fn(|_| StandardNormal.sample(rng));
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len > 1e-9 {
            return v.map(|x| x / len);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub task: Task,
    pub shapes: Vec<Shape>,
    pub clouds: usize,
    pub points_per_cloud: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.points_per_cloud == 0 {
            return Err(Error::Config("synthetic data needs at least one shape and one point per cloud".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Labels carry global part ids.
    pub cloud: PointCloud,
    /// Index into the dataset's shape list: the class for classification,
    /// the category for segmentation.
    pub category: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub shapes: Vec<Shape>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Named shapes, or the largest category a sample uses, whichever is
    /// larger; file datasets carry no shape names.
    pub fn num_categories(&self) -> usize {
        let used = self.samples.iter().map(|s| s.category + 1).max().unwrap_or(0);
        self.shapes.len().max(used)
    }

    pub fn num_parts(&self) -> usize {
        self.num_categories() * Shape::PARTS
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            task: self.task,
            shapes: self.shapes.clone(),
            samples: self.samples[range].to_vec(),
        }
    }
}

/// Global part ids belonging to a category.
pub fn parts_of_category(category: usize) -> Vec<usize> {
    (category * Shape::PARTS..(category + 1) * Shape::PARTS).collect()
}

/// Shapes are generated around the origin; scale them into the unit ball.
fn normalize(coords: &mut [Point]) {
    let far = coords
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    if far > 0.0 {
        for p in coords.iter_mut() {
            *p = p.map(|x| x / far);
        }
    }
}

fn generate_one(shape: Shape, category: usize, spec: &SyntheticDatasetSpec, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut coords, normals, labels) = shape.sample(spec.points_per_cloud, &mut rng);
    normalize(&mut coords);
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for p in coords.iter_mut() {
            for x in p.iter_mut() {
                *x += noise.sample(&mut rng);
            }
        }
    }
    let labels = labels.into_iter().map(|l| category * Shape::PARTS + l).collect();
    let cloud = PointCloud::new(coords)?.with_normals(normals)?.with_labels(labels)?;
    Ok(Sample { cloud, category })
}

/// Clouds cycle through the shape list, so classes stay balanced. Each
/// cloud draws from its own generator seeded from the spec seed, which
/// keeps the output independent of the thread count.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let seeds: Vec<u64> = (0..spec.clouds).map(|_| master.next_u64()).collect();
    let samples = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let category = i % spec.shapes.len();
            generate_one(spec.shapes[category], category, spec, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        task: spec.task,
        shapes: spec.shapes.clone(),
        samples,
    })
}
