pub mod case;
pub mod cases;
pub mod cpf;
pub mod powerflow;

pub use case::{
    apply_outage, build_ybus, connection_matrix, is_connected, parse_matpower_case, Branch, Bus,
    BusKind, CaseError, ConnectionMatrix, Generator, NetworkCase,
};
pub use cpf::{
    run_cpf, transfer_schedule, CpfError, CpfOptions, CpfTrace, Parameterization, Termination,
    TransferSchedule,
};
pub use powerflow::{
    flat_start, injections, jacobian, mismatch, solve_newton, PFSolution, PFState, PfError,
};
pub mod checkpoint;
pub mod contingency;
pub mod dataset;
pub mod diffusion;
pub mod eval;
pub mod pipeline;
pub mod tensor;
pub mod unet;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use contingency::{enumerate_n1, rank_all, rank_all_jobs, OracleError, OutageId, RankingRow, RankingTable};
pub use dataset::{
    generate_dataset, ContingencySample, Dataset, DatasetError, GridEncoder, GridImage, Normalizer,
};
pub use diffusion::{sample_batch, train, DiffusionError, NoiseSchedule, SampleOptions, TrainConfig};
pub use eval::{EvalConfig, EvalReport};
pub use pipeline::{run_pipeline, PipelineError, RunConfig};
pub use unet::{DenoiserParams, UNetConfig};
