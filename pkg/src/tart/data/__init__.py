from importlib import resources


def fixture_path(name: str = "eight_bars.mid"):
    """Path to a bundled example file."""
    return resources.files(__package__).joinpath(name)
