use elite::{cli, exec};

fn main() {
    exec::init_thread_cap();
    std::process::exit(cli::run(std::env::args_os()));
}
