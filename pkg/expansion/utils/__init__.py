import os

# Bundled nominal configuration, resolved against the repository root
DEFAULT_CONFIG = os.path.join(
    os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))),
    "data", "reference", "paper_nominal.toml",
)


def default_config_path() -> str:
    """The bundled configuration, or the one named by EXPANSION_CONFIG."""
    return os.environ.get("EXPANSION_CONFIG", DEFAULT_CONFIG)
