"""Multi-level, multi-path offloading of optimizer state across storage tiers."""

from .optimizer import AdamHyper, Residency, Subgroup, adam_step, update_throughput
from .placement import (AllocationVector, BandwidthEstimate, assign_storage_tier,
                        assign_storage_tiers, assign_subgroups, update_bandwidth_estimates)
from .precision import GradBufferF16, downscale_f32_to_f16, upscale_f16_to_f32
from .scheduler import (EngineFlags, HostBufferPool, OffloadEngine, SyntheticGradients,
                        UpdatePlan, next_subgroup, update_order)
from .tier import (Tier, TierKind, TierSpec, probe_bandwidth, read_subgroup,
                   write_subgroup)
from .trace import EventTrace

__version__ = "0.1.0"
