"""API module: the command line (``api.cli``) and the job service (``api.server``)."""
