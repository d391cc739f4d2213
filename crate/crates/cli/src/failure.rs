use entity_gcn::model::ModelError;
use entity_gcn::tensor::TensorError;

/// An error plus the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numerical,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            kind: Kind::Usage,
            error: anyhow::anyhow!(msg.into()),
        }
    }

    pub fn data(error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: Kind::Data,
            error: error.into(),
        }
    }

    pub fn code(&self) -> u8 {
        match self.kind {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Numerical => 3,
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let kind = match &e {
            e if e.is_numerical() => Kind::Numerical,
            ModelError::UnknownVariant(_) => Kind::Usage,
            _ => Kind::Data,
        };
        Self { kind, error: e.into() }
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        ModelError::from(e).into()
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {
        $(impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::data(e)
            }
        })*
    };
}

data_errors!(
    std::io::Error,
    serde_json::Error,
    entity_gcn::dataset::DatasetError,
    entity_gcn::graph::GraphError,
    entity_gcn::encoder::EncoderError
);
