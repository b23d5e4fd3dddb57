"""Teacher-model fingerprinting against transfer-learning classifiers.

Pipeline: build/train a desk-scale teacher zoo (`zoo`), transfer students
from extractor prefixes (`transfer`), hide them behind a query-counting
API (`blackbox`, `wire`), synthesize fingerprinting pairs per candidate
(`fpgen`), infer the teacher from label-only responses with statistical
backing (`inference`), and mount the follow-on stealing study
(`stealing`). `experiment` + `cli` wire it into reproducible runs.
"""

__version__ = "0.1.0"
