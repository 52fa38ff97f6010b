use std::process::ExitCode;

fn main() -> ExitCode {
    let threads = std::env::var("TDPG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot build thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let code = tdpg_cli::run_from_args(std::env::args_os());
    ExitCode::from(code as u8)
}
