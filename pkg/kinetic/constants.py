class Enum:
    def __init__(self, **kwargs):
        self.__dict__.update(kwargs)

    def __contains__(self, value):
        return value in self.__dict__.values()

    def __iter__(self):
        return iter(self.__dict__.values())

    def values(self):
        return iter(self.__dict__.values())


MODE = Enum(
    COMPLETE='C',
    PARTIAL='P',
)


MODEL = Enum(
    MEAN_FIELD_LANGEVIN='MeanFieldLangevin',
    KRAMERS_KERNEL='KramersKernel',
)


INITIAL_LAW = Enum(
    STANDARD_NORMAL='standard_normal',
)


# Stream tags of the counter-based generator. Every random draw in a
# simulation is addressed by (seed, stream, particle, step block).
STREAM = Enum(
    INIT=1,
    NOISE=2,
    REFERENCE_INIT=3,
    REFERENCE_NOISE=4,
    PROBE=5,
    START=6,
)


NORMALIZATION = Enum(
    RAW='raw',
    DELTA_OVER_N='delta/N',
    ONE_OVER_N='1/N',
    ONE_OVER_SQRT_N='1/sqrt(N)',
    ONE_OVER_SQRT_N_DELTA='1/sqrt(N*delta)',
)


EXIT_CODE = Enum(
    SUCCESS=0,
    UNEXPECTED=1,
    CONFIG_ERROR=2,
    NUMERIC_FAILURE=3,
)


A_MIN = 1e-3

DIVERGENCE_BOUND = 1e9

CUBIC_SATURATION = 10.0

STEP_BLOCK = 256

FLOAT_FORMAT = '%.17g'

MANIFEST_DATETIME_FORMAT = '%Y-%m-%dT%H:%M:%SZ'

# Partial-observation corrections: the quadratic term of the partial contrast
# carries 3/2, the surrogate quadratic variation deflates by 2/3 and the
# diffusion variance inflates from 2 to 9/4.
PARTIAL_CONTRAST_FACTOR = 1.5

PARTIAL_QV_FACTOR = 2.0 / 3.0

SIGMA_VARIANCE_FACTOR = {
    MODE.COMPLETE: 2.0,
    MODE.PARTIAL: 9.0 / 4.0,
}

# Cells with N * Delta at or above this are flagged: the normal limits assume N * Delta -> 0.
N_DELTA_FLAG = 1.0

ANDERSON_LEVEL = 1.0

REPLICATIONS_CSV = 'replications.csv'

JOURNAL_FILE = 'journal.jsonl'

MANIFEST_FILE = 'manifest.json'
