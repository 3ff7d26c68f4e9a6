from surfelgrid.main import cli

cli(prog_name="surfelgrid")
