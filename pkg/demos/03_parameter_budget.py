"""Where the parameters go.

Prints the parameter count of every component of the default detector and
splits each graph attention module into its edge MLP and its fusion layer.
The edge MLPs are tiny; the D x D fusion layers are not.
"""

from hrrcnn.detector import ModelConfig, init_params
from hrrcnn.metrics import param_count_report

for label, config in (("default", ModelConfig()), ("narrow D=32", ModelConfig(hidden_dim=32))):
    report = param_count_report(init_params(config, 0))
    print(f"\n{label}")
    for key, value in report.items():
        print(f"  {key:34s} {value:.4f}" if isinstance(value, float) else f"  {key:34s} {value}")

# fusion cost grows with D^2 while the edge MLP depends only on the edge width
D = ModelConfig().hidden_dim
print(f"\none D->D fusion layer at D={D}: {D * D + D} parameters")
