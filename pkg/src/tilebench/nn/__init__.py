"""Model families, blocks and parameter counting."""

from .counting import count_parameters
from .models import (ArchitectureSpec, Family, Scale, build_model, build_skeleton,
                     enumerate_parameters, reference_spec, toy_spec)

__all__ = ["ArchitectureSpec", "Family", "Scale", "build_model", "build_skeleton",
           "count_parameters", "enumerate_parameters", "reference_spec", "toy_spec"]
