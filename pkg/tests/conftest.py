import os

# single-core box; keep torch honest and runs reproducible
os.environ.setdefault("OMP_NUM_THREADS", "1")

import torch

torch.set_num_threads(int(os.environ.get("UNO_LAB_THREADS", "1")))
