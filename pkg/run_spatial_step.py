import cli

cli.main([
    "spatial-effective", "--model", "models/two_state.toml", "--rho",
    "profiles/step.csv"
])
