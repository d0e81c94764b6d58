"""DRAM communication scheduling toolkit for DNN accelerators."""

__version__ = "0.1.0"

from .evaluator import (EvalReport, HardwareConfig, buffer_timeline, cost,
                        dram_tensor_model, latency_lower_bound, simulate,
                        tile_compute_model)
from .explorer import (AllocatorParams, SAParams, SearchState, baseline_schedule,
                       buffer_allocator_loop, propose_dlsa_move, propose_lfa_move,
                       sa_accept, sa_temperature, stage1_explore, stage2_explore)
from .model import (Layer, ModelGraph, WorkloadError, builtin_workload,
                    parse_model_file, tensor_sizes, validate_graph)
from .notation import (DramTensor, EncodingError, ExecutionPlan, ScheduleEncoding,
                       apply_dlsa, double_buffer_dlsa, initial_encoding, parse_lfa,
                       plan_from_encoding, validate_encoding)
from .tiling import (TileGeometry, TileRegion, backprop_input_region,
                     flg_tile_geometry, max_tiling_number, min_tiling_number,
                     partition_output_tiles)
