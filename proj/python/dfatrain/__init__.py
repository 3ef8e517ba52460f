from ._dfatrain import *  # noqa: F401,F403
