//! Worker processes for `train --distributed`.

use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Stdio};

pub struct Workers {
    children: Vec<Child>,
    pub servers: Vec<String>,
    pub clients: Vec<Vec<String>>,
}

fn spawn_one(role: &str) -> Result<(Child, String), String> {
    let exe = std::env::current_exe().map_err(|e| format!("locate executable: {e}"))?;
    let mut child = Command::new(exe)
        .args(["worker", "--role", role])
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| format!("spawn {role} worker: {e}"))?;
    let mut line = String::new();
    let stdout = child.stdout.take().ok_or("worker has no stdout")?;
    BufReader::new(stdout).read_line(&mut line).map_err(|e| format!("read {role} worker address: {e}"))?;
    match line.trim().strip_prefix("listening ") {
        Some(addr) => Ok((child, addr.to_string())),
        None => {
            let _ = child.kill();
            Err(format!("{role} worker did not report an address: {line:?}"))
        }
    }
}

impl Workers {
    pub fn spawn(n_servers: usize, clients_per_server: usize) -> Result<Self, String> {
        let mut w = Workers { children: Vec::new(), servers: Vec::new(), clients: Vec::new() };
        for _ in 0..n_servers {
            let mut mine = Vec::new();
            for _ in 0..clients_per_server {
                let (c, addr) = spawn_one("client")?;
                w.children.push(c);
                mine.push(addr);
            }
            w.clients.push(mine);
            let (c, addr) = spawn_one("server")?;
            w.children.push(c);
            w.servers.push(addr);
        }
        Ok(w)
    }
}

impl Drop for Workers {
    fn drop(&mut self) {
        for c in &mut self.children {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}
