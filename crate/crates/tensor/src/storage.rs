use half::f16;

use crate::dtype::DType;
use crate::meter;

#[derive(Debug, Clone)]
pub(crate) enum Data {
    F16(Vec<f16>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Data {
    pub fn dtype(&self) -> DType {
        match self {
            Data::F16(_) => DType::F16,
            Data::F32(_) => DType::F32,
            Data::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Data::F16(v) => v.len(),
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
        }
    }

    pub fn bytes(&self) -> usize {
        self.len() * self.dtype().size_in_bytes()
    }

    pub fn from_f32(values: Vec<f32>, dtype: DType) -> Data {
        match dtype {
            DType::F32 => Data::F32(values),
            DType::F16 => Data::F16(values.into_iter().map(f16::from_f32).collect()),
            DType::F64 => Data::F64(values.into_iter().map(f64::from).collect()),
        }
    }

    pub fn from_f64(values: Vec<f64>, dtype: DType) -> Data {
        match dtype {
            DType::F64 => Data::F64(values),
            DType::F32 => Data::F32(values.into_iter().map(|v| v as f32).collect()),
            DType::F16 => Data::F16(values.into_iter().map(f16::from_f64).collect()),
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        match self {
            Data::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
            Data::F32(v) => v.clone(),
            Data::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Data::F16(v) => v.iter().map(|x| x.to_f64()).collect(),
            Data::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Data::F64(v) => v.clone(),
        }
    }

    pub fn cast(&self, dtype: DType) -> Data {
        if dtype == self.dtype() {
            return self.clone();
        }
        match self {
            Data::F64(v) => Data::from_f64(v.clone(), dtype),
            _ => Data::from_f32(self.to_f32_vec(), dtype),
        }
    }
}

/// A tensor buffer. Metered buffers charge the thread's device meter for
/// their lifetime; unmetered ones (model weights bound from a host-side
/// parameter store) do not.
#[derive(Debug)]
pub(crate) struct Buffer {
    pub data: Data,
    metered: usize,
}

impl Buffer {
    pub fn metered(data: Data) -> Buffer {
        let bytes = data.bytes();
        meter::charge(bytes);
        Buffer {
            data,
            metered: bytes,
        }
    }

    pub fn unmetered(data: Data) -> Buffer {
        Buffer { data, metered: 0 }
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        if self.metered > 0 {
            meter::release(self.metered);
        }
    }
}
