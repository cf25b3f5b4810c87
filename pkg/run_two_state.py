import cli

cli.main(["effective", "--model", "models/two_state.toml"])
