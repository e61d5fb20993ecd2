"""One module per CLI subcommand; each exposes register(subparsers, parents) and run(args)."""
