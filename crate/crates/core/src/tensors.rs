//! Layered model weights, per-client updates and coordinate-wise views.
//!
//! Every layer is a row-major flat `f64` buffer with a shape. Coordinate
//! `(l, i)` is element `i` of the flattened layer `l`, which is the unit all
//! coordinate-wise aggregators and the detector work on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape(Vec<usize>);

impl TensorShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidShape("shape has no dimensions".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("extent {pos} is zero in {dims:?}")));
        }
        Ok(Self(dims))
    }

    pub fn vector(len: usize) -> Result<Self> {
        Self::new(vec![len])
    }

    pub fn matrix(rows: usize, cols: usize) -> Result<Self> {
        Self::new(vec![rows, cols])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    shape: TensorShape,
    data: Vec<f64>,
}

impl Layer {
    pub fn shape(&self) -> &TensorShape {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// An ordered list of layer tensors. Values are finite on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    layers: Vec<Layer>,
}

impl ModelWeights {
    pub fn new(layers: Vec<(TensorShape, Vec<f64>)>) -> Result<Self> {
        let mut out = Vec::with_capacity(layers.len());
        for (l, (shape, data)) in layers.into_iter().enumerate() {
            if data.len() != shape.numel() {
                return Err(Error::InvalidShape(format!(
                    "layer {l}: {} values for shape {:?}",
                    data.len(),
                    shape.dims()
                )));
            }
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer_index: l,
                    index: i,
                });
            }
            out.push(Layer { shape, data });
        }
        Ok(Self { layers: out })
    }

    pub fn zeros(shapes: &[TensorShape]) -> Self {
        Self {
            layers: shapes
                .iter()
                .map(|s| Layer {
                    shape: s.clone(),
                    data: vec![0.0; s.numel()],
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shapes())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &Layer {
        &self.layers[l]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.data.len()).sum()
    }

    pub fn shapes(&self) -> Vec<TensorShape> {
        self.layers.iter().map(|l| l.shape.clone()).collect()
    }

    pub fn same_shape(&self, other: &ModelWeights) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.shape == b.shape)
    }

    /// All coordinates in layer-major, row-major order.
    pub fn iter_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.data.iter().copied())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter_flat().collect()
    }

    /// Same shapes as `self`, values taken from `flat` in layer-major order.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::InvalidShape(format!(
                "{} values for a model with {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        Ok(self.with_flat_unchecked(flat))
    }

    pub(crate) fn with_flat_unchecked(&self, flat: &[f64]) -> Self {
        let mut offset = 0;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let n = l.data.len();
                let data = flat[offset..offset + n].to_vec();
                offset += n;
                Layer {
                    shape: l.shape.clone(),
                    data,
                }
            })
            .collect();
        Self { layers }
    }

    pub(crate) fn layer_data_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.layers[l].data
    }

    pub fn layout(&self) -> CoordinateLayout {
        let mut offsets = Vec::with_capacity(self.layers.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for l in &self.layers {
            acc += l.data.len();
            offsets.push(acc);
        }
        CoordinateLayout { offsets }
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter_flat().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &ModelWeights) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ModelWeights) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    shape: l.shape.clone(),
                    data: l.data.iter().map(|&v| f(v)).collect(),
                })
                .collect(),
        }
    }

    pub fn zip_with(&self, other: &ModelWeights, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| Layer {
                    shape: a.shape.clone(),
                    data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
                })
                .collect(),
        })
    }

    /// Euclidean distance over all coordinates.
    pub fn distance(&self, other: &ModelWeights) -> Result<f64> {
        Ok(self.squared_distance(other)?.sqrt())
    }

    pub fn squared_distance(&self, other: &ModelWeights) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .iter_flat()
            .zip(other.iter_flat())
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    fn check_same_shape(&self, other: &ModelWeights) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch {
                client_id: None,
                layer_index: self.layers.len().min(other.layers.len()),
            });
        }
        match self
            .layers
            .iter()
            .zip(&other.layers)
            .position(|(a, b)| a.shape != b.shape)
        {
            Some(l) => Err(Error::ShapeMismatch {
                client_id: None,
                layer_index: l,
            }),
            None => Ok(()),
        }
    }
}

/// Maps flat coordinate indices to `(layer, index)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordinateLayout {
    offsets: Vec<usize>,
}

impl CoordinateLayout {
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn locate(&self, flat: usize) -> (usize, usize) {
        debug_assert!(flat < self.total());
        // offsets is ascending; the layer is the last offset <= flat.
        let l = self.offsets.partition_point(|&o| o <= flat) - 1;
        (l, flat - self.offsets[l])
    }

    pub fn flat_index(&self, layer: usize, index: usize) -> usize {
        self.offsets[layer] + index
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub weights: ModelWeights,
    dataset_size: usize,
}

impl ClientUpdate {
    pub fn new(client_id: usize, weights: ModelWeights, dataset_size: usize) -> Result<Self> {
        if dataset_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "client {client_id}: dataset size must be at least 1"
            )));
        }
        Ok(Self {
            client_id,
            weights,
            dataset_size,
        })
    }

    pub fn dataset_size(&self) -> usize {
        self.dataset_size
    }
}

/// The cross-client values `V_{i,l}` at one coordinate, in client order.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateVector {
    pub layer_index: usize,
    pub coord_index: usize,
    pub values: Vec<f64>,
}

pub fn validate_uniform(updates: &[ClientUpdate]) -> Result<()> {
    let first = updates.first().ok_or(Error::EmptyUpdateSet)?;
    let reference = first.weights.layers();
    for u in &updates[1..] {
        let layers = u.weights.layers();
        if layers.len() != reference.len() {
            return Err(Error::ShapeMismatch {
                client_id: Some(u.client_id),
                layer_index: layers.len().min(reference.len()),
            });
        }
        if let Some(l) = layers
            .iter()
            .zip(reference)
            .position(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::ShapeMismatch {
                client_id: Some(u.client_id),
                layer_index: l,
            });
        }
    }
    Ok(())
}

/// Streams one [`CoordinateVector`] per coordinate, layer-major. Values keep
/// the order of `updates`.
pub fn coordinate_views(updates: &[ClientUpdate]) -> Result<CoordinateViews<'_>> {
    validate_uniform(updates)?;
    Ok(CoordinateViews {
        updates,
        layer: 0,
        index: 0,
    })
}

pub struct CoordinateViews<'a> {
    updates: &'a [ClientUpdate],
    layer: usize,
    index: usize,
}

impl Iterator for CoordinateViews<'_> {
    type Item = CoordinateVector;

    fn next(&mut self) -> Option<CoordinateVector> {
        let template = &self.updates[0].weights;
        while self.layer < template.num_layers() && self.index >= template.layer(self.layer).data().len() {
            self.layer += 1;
            self.index = 0;
        }
        if self.layer >= template.num_layers() {
            return None;
        }
        let (l, i) = (self.layer, self.index);
        self.index += 1;
        Some(CoordinateVector {
            layer_index: l,
            coord_index: i,
            values: gather(self.updates, l, i),
        })
    }
}

pub(crate) fn gather(updates: &[ClientUpdate], layer: usize, index: usize) -> Vec<f64> {
    updates
        .iter()
        .map(|u| u.weights.layer(layer).data()[index])
        .collect()
}

/// Applies `f` to every coordinate vector (in parallel when enabled) and
/// reassembles the results into the shape of the first update.
pub fn try_map_coordinates<F>(updates: &[ClientUpdate], f: F) -> Result<ModelWeights>
where
    F: Fn(&CoordinateVector) -> Result<f64> + Sync + Send,
{
    validate_uniform(updates)?;
    let template = &updates[0].weights;
    let layout = template.layout();
    let flat = par::try_map_indexed(layout.total(), |p| {
        let (l, i) = layout.locate(p);
        f(&CoordinateVector {
            layer_index: l,
            coord_index: i,
            values: gather(updates, l, i),
        })
    })?;
    Ok(template.with_flat_unchecked(&flat))
}

pub fn map_coordinates<F>(updates: &[ClientUpdate], f: F) -> Result<ModelWeights>
where
    F: Fn(&CoordinateVector) -> f64 + Sync + Send,
{
    try_map_coordinates(updates, |v| Ok(f(v)))
}

/// Places `selected[(l, i)]` at every coordinate of `template`'s shapes.
pub fn reassemble(template: &ModelWeights, selected: &BTreeMap<(usize, usize), f64>) -> Result<ModelWeights> {
    for &(l, i) in selected.keys() {
        if l >= template.num_layers() || i >= template.layer(l).data().len() {
            return Err(Error::ExtraCoordinate {
                layer_index: l,
                coord_index: i,
            });
        }
    }
    let mut flat = Vec::with_capacity(template.num_params());
    for (l, layer) in template.layers().iter().enumerate() {
        for i in 0..layer.data().len() {
            match selected.get(&(l, i)) {
                Some(&v) => flat.push(v),
                None => {
                    return Err(Error::MissingCoordinate {
                        layer_index: l,
                        coord_index: i,
                    })
                }
            }
        }
    }
    Ok(template.with_flat_unchecked(&flat))
}

pub const DUMP_VERSION: u64 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DumpLayer {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightDump {
    version: u64,
    layers: Vec<DumpLayer>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u64,
}

impl ModelWeights {
    /// Serializes to the version-1 weight-dump JSON document.
    pub fn to_dump_json(&self) -> String {
        let dump = WeightDump {
            version: DUMP_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| DumpLayer {
                    shape: l.shape.dims().to_vec(),
                    data: l.data.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&dump).expect("finite weights always serialize")
    }

    pub fn from_dump_json(text: &str) -> Result<Self> {
        let probe: VersionProbe =
            serde_json::from_str(text).map_err(|e| Error::MalformedDump(e.to_string()))?;
        if probe.version != DUMP_VERSION {
            return Err(Error::UnsupportedVersion(probe.version));
        }
        let dump: WeightDump = serde_json::from_str(text).map_err(|e| Error::MalformedDump(e.to_string()))?;
        let layers = dump
            .layers
            .into_iter()
            .map(|l| Ok((TensorShape::new(l.shape)?, l.data)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }
}
