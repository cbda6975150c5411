from .ablation import run_ablation
from .config import RunConfig, parse, serialize, tiny_config
from .experiment import evaluate, train
from .gradcheck import GradcheckReport, gradcheck
