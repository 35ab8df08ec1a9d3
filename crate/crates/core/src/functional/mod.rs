//! Operator semantics: a floating-point oracle for every network operation
//! and the bit-exact FIX8 reference that the engine simulators must match.

mod attention;
mod calibrate;
mod dump;
mod float_ops;
mod forward;
mod quant;
mod tensor;
mod weights;

pub use attention::{multi_scale_msa_ref, multi_scale_msa_trace, relu_linear_attention_ref, AttentionParts, MsaTrace};
pub use calibrate::{calibrate_scales, max_abs_scale, CalibratedParams, LayerQuant, MsaQuant, SaturationStats};
pub use dump::{read_dump, write_dump, DumpData, DumpHeader};
pub use float_ops::{activation_ref, conv2d_ref, fold_batchnorm, hardswish, residual_add_ref, BatchNorm};
pub use forward::{
    forward_float, forward_quantized, forward_quantized_with_stats, forward_with, layer_with, msa_quantized, msa_with,
    FloatTrace, QuantBackend, QuantMsaTrace, Reference,
};
pub use quant::{
    conv_accumulate, dequantize, fixed_divide, q_attention, q_residual_add, qlinear, quantize, round_half_even,
    AttentionScales, MsaIntermediate, PostOp, Requantizer, DIVISION_GUARD_BITS,
};
pub use tensor::{FloatTensor, QuantParams, QuantTensor, TokenMatrix};
pub use weights::{
    quantize_weights, ConvWeights, FloatConv, LayerWeights, MsaWeights, QuantConv, QuantizedModel, WeightGen,
};

pub(crate) use quant::{check_i32, conv_output_shape, divide_rows, finish_accumulators, requantize_vec};
