fn main() {
    std::process::exit(latent_sde::cli::main_with_args(std::env::args_os()));
}
