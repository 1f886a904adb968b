/// Point-wise non-linearity applied to the grouped hidden state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Activation {
    /// tanh approximation
    #[default]
    Gelu,
    Silu,
    Relu,
    Identity,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Activation {
    pub fn apply_f64(self, x: f64) -> f64 {
        match self {
            Self::Gelu => 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh()),
            Self::Silu => x / (1.0 + (-x).exp()),
            Self::Relu => x.max(0.0),
            Self::Identity => x,
        }
    }

    pub fn derivative_f64(self, x: f64) -> f64 {
        match self {
            Self::Gelu => {
                let th = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
            }
            Self::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Identity => 1.0,
        }
    }

    pub fn apply(self, x: f32) -> f32 {
        self.apply_f64(x as f64) as f32
    }

    pub fn derivative(self, x: f32) -> f32 {
        self.derivative_f64(x as f64) as f32
    }

    pub fn apply_in_place(self, xs: &mut [f32]) {
        if self != Self::Identity {
            xs.iter_mut().for_each(|x| *x = self.apply(*x));
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gelu => "gelu",
            Self::Silu => "silu",
            Self::Relu => "relu",
            Self::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Self::Gelu),
            "silu" | "swish" => Ok(Self::Silu),
            "relu" => Ok(Self::Relu),
            "identity" | "linear" => Ok(Self::Identity),
            other => Err(crate::error::arg_err!("unknown activation {other:?}")),
        }
    }
}
