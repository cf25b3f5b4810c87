import cli

cli.main([
    "frap-synth", "--protocol", "protocols/frap_identified.toml", "--params",
    "d=1.0,c=0.5,beta1=0.2,beta2=0.1", "--noise", "0.01", "--seed", "7",
    "--out", "frap_identified"
])
cli.main([
    "frap-fit", "--protocol", "protocols/frap_identified.toml", "--data",
    "frap_identified/curve.csv", "--grid",
    "d=1e-1:1e1:3,c=1e-1:1e1:3,beta1=1e-2:1:3,beta2=1e-2:1:3", "--out",
    "frap_identified/fit"
])
