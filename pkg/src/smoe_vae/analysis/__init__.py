from .experiments import (DEFAULT_EXPERTS, DEFAULT_FRACTIONS, HomogeneityReport, SweepCell,
                          homogeneity_experiment, sweep)
from .grids import read_pgm, recon_grid, write_pgm
from .specialization import (AssignmentTable, DegenerateTargetError, ProbeResult, adjusted_rand_index,
                             agreement, assignments, linear_probe, mapped_accuracy, normalized_mutual_info,
                             utilization)
from .tsne import EmbeddingResult, TsneParameterError, tsne, write_embedding_csv
