use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeriesError {
    #[error("series must have at least one channel")]
    NoChannels,
    #[error("data length {len} is not a multiple of {channels} channels")]
    Ragged { len: usize, channels: usize },
}

/// Frame-major multichannel time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct MultiSeries {
    channels: usize,
    data: Vec<f64>,
}

impl MultiSeries {
    pub fn new(channels: usize, data: Vec<f64>) -> Result<Self, SeriesError> {
        if channels == 0 {
            return Err(SeriesError::NoChannels);
        }
        if !data.len().is_multiple_of(channels) {
            return Err(SeriesError::Ragged {
                len: data.len(),
                channels,
            });
        }
        Ok(MultiSeries { channels, data })
    }

    pub fn from_frames<const N: usize>(frames: &[[f64; N]]) -> Self {
        assert!(N > 0);
        MultiSeries {
            channels: N,
            data: frames.iter().flatten().copied().collect(),
        }
    }

    /// Single-channel series.
    pub fn scalar(values: &[f64]) -> Self {
        MultiSeries {
            channels: 1,
            data: values.to_vec(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn frames(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels)
    }

    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(c).step_by(self.channels).copied()
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.data[i * self.channels + c]
    }

    pub fn get_mut(&mut self, i: usize, c: usize) -> &mut f64 {
        &mut self.data[i * self.channels + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl From<MultiSeries> for Vec<Vec<f64>> {
    fn from(s: MultiSeries) -> Self {
        s.frames().map(|f| f.to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for MultiSeries {
    type Error = SeriesError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        let channels = rows.first().map_or(1, |r| r.len());
        if rows.iter().any(|r| r.len() != channels) {
            return Err(SeriesError::Ragged {
                len: rows.iter().map(Vec::len).sum(),
                channels,
            });
        }
        MultiSeries::new(channels, rows.into_iter().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_and_channel_access() {
        let s = MultiSeries::from_frames(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(s.len(), 3);
        assert_eq!(s.frame(1), &[3.0, 4.0]);
        assert_eq!(s.channel(1).collect::<Vec<_>>(), vec![2.0, 4.0, 6.0]);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "[[1.0,2.0],[3.0,4.0],[5.0,6.0]]");
        let back: MultiSeries = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_ragged() {
        assert!(MultiSeries::new(3, vec![0.0; 7]).is_err());
        assert!(serde_json::from_str::<MultiSeries>("[[1.0],[1.0,2.0]]").is_err());
    }
}
