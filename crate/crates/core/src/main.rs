fn main() {
    std::process::exit(patient_repr::cli::run_command(std::env::args_os()));
}
