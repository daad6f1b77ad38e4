"""Bundled network configs."""
from importlib.resources import files


def config_path(name):
    return files(__name__).joinpath(name)
