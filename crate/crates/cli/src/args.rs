//! Command-line grammar. Every verb becomes exactly one scripted [`Op`].

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use enclave_core::directory::{Affiliation, MembershipAction, PlatformRole};
use enclave_core::egress::{ClipboardDirection, ExportVerdict};
use enclave_core::enclave::{Direction, RequestedProtocol, Service, ZoneId};
use enclave_core::policy::{DataClassification, ProjectRole};
use enclave_core::scenario::Op;
use enclave_core::types::AccessMode;

#[derive(Debug, Parser)]
#[command(name = "enclave", version, about = "Protected-enclave access broker")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Topology file (TOML).
    #[arg(long, global = true, env = "BROKER_TOPOLOGY")]
    pub topology: Option<PathBuf>,
    /// Directory bootstrap file (TOML).
    #[arg(long, global = true, env = "BROKER_DIRECTORY")]
    pub directory: Option<PathBuf>,
    /// Scenario file (TOML) for `run`.
    #[arg(long, global = true, env = "BROKER_SCENARIO")]
    pub scenario: Option<PathBuf>,
    #[arg(long, global = true, env = "BROKER_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "BROKER_RETENTION_DAYS")]
    pub retention_days: Option<u64>,
    /// Address for `serve`.
    #[arg(
        long,
        global = true,
        env = "BROKER_LISTEN",
        default_value = "127.0.0.1:7878"
    )]
    pub listen: SocketAddr,
    /// Journal holding the broker state between invocations.
    #[arg(
        long,
        global = true,
        env = "BROKER_STATE",
        default_value = "enclave-state.jsonl"
    )]
    pub state: PathBuf,
    /// Simulated time at which to apply the command.
    #[arg(long, global = true)]
    pub at: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Loads topology and directory and starts a new state journal.
    Init {
        /// Replace an existing journal.
        #[arg(long)]
        force: bool,
    },
    #[command(subcommand)]
    User(UserCmd),
    #[command(subcommand)]
    Group(GroupCmd),
    #[command(subcommand)]
    Project(ProjectCmd),
    /// Steward grants a mode on a project.
    Grant {
        actor: String,
        project: String,
        netid: String,
        mode: AccessMode,
    },
    /// Steward revokes a mode; matching sessions are closed.
    Revoke {
        actor: String,
        project: String,
        netid: String,
        mode: AccessMode,
    },
    #[command(subcommand)]
    Vm(VmCmd),
    #[command(subcommand)]
    Share(ShareCmd),
    #[command(subcommand)]
    Net(NetCmd),
    #[command(subcommand)]
    Session(SessionCmd),
    #[command(subcommand)]
    Egress(EgressCmd),
    #[command(subcommand)]
    Export(ExportCmd),
    #[command(subcommand)]
    Image(ImageCmd),
    #[command(subcommand)]
    Audit(AuditCmd),
    /// Moves the simulated clock forward.
    Advance { to: u64 },
    /// Replays a scenario file and exits with its status.
    Run {
        /// Print the ledger export after the run.
        #[arg(long)]
        ledger: bool,
    },
    /// Serves newline-delimited JSON requests on `--listen`.
    Serve,
}

#[derive(Debug, Subcommand)]
pub enum UserCmd {
    Register {
        netid: String,
        #[arg(long, requires = "sponsor")]
        affiliate: bool,
        #[arg(long)]
        sponsor: Option<String>,
    },
    Role {
        actor: String,
        netid: String,
        role: PlatformRole,
    },
    Mfa {
        netid: String,
        factor: String,
    },
    Deactivate {
        actor: String,
        netid: String,
    },
    TrustIssuer {
        actor: String,
        issuer: String,
    },
    MapSubject {
        actor: String,
        issuer: String,
        subject: String,
        netid: String,
    },
    Authenticate {
        #[arg(long)]
        netid: Option<String>,
        #[arg(long, requires = "subject")]
        issuer: Option<String>,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        mfa: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum GroupCmd {
    Create {
        actor: String,
        name: String,
        /// Project whose steward owns the group.
        #[arg(long)]
        project: Option<String>,
    },
    Add {
        actor: String,
        group: String,
        netid: String,
    },
    Remove {
        actor: String,
        group: String,
        netid: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProjectCmd {
    Register {
        actor: String,
        id: String,
        classification: DataClassification,
        #[arg(long = "steward", required = true)]
        stewards: Vec<String>,
        #[arg(long = "role-rule")]
        role_rules: Vec<String>,
        #[arg(long)]
        zone: Option<ZoneId>,
        #[arg(long)]
        retention_days: Option<u64>,
    },
    Role {
        actor: String,
        project: String,
        role: ProjectRole,
        netid: String,
    },
    /// Evaluates the classification table for a principal.
    Check {
        netid: String,
        project: String,
        mode: AccessMode,
        #[arg(long)]
        mfa: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum VmCmd {
    Provision {
        project: String,
        #[arg(long)]
        zone: Option<ZoneId>,
        #[arg(long, default_value_t = 2)]
        cpu: u32,
        #[arg(long, default_value_t = 8)]
        ram_gb: u32,
        #[arg(long)]
        dedicated: bool,
    },
    Resize {
        vm: String,
        cpu: u32,
        ram_gb: u32,
    },
    Destroy {
        vm: String,
    },
    Write {
        vm: String,
        token: String,
    },
    Read {
        vm: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum ShareCmd {
    Create {
        project: String,
        protocol: RequestedProtocol,
        capacity_tb: f64,
        #[arg(long)]
        dedicated_device: bool,
        #[arg(long)]
        encrypted: bool,
    },
    Acl {
        actor: String,
        share: String,
        groups: Vec<String>,
    },
    Check {
        share: String,
        #[arg(long, conflicts_with = "session", required_unless_present = "session")]
        identity: Option<String>,
        #[arg(long)]
        session: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum NetCmd {
    /// Reachability query without side effects. Sources are `zone:<id>`,
    /// `vm:<id>` or `session:<id>`; destinations are `zone:<id>`, `vm:<id>`,
    /// `share:<id>` or `origin:<url>`.
    Reach {
        src: String,
        dst: String,
        service: String,
    },
    /// Recorded connection attempt.
    Connect {
        src: String,
        dst: String,
        service: String,
    },
    Exception {
        actor: String,
        id: String,
        service: Service,
        src: String,
        dst: String,
        direction: Direction,
        #[arg(long = "documented-by")]
        documented_by: String,
    },
    Whitelist {
        actor: String,
        project: String,
        origins: Vec<String>,
    },
    Fetch {
        project: String,
        url: String,
    },
}

#[derive(Debug, Clone, Args)]
pub struct SessionArgs {
    pub netid: String,
    pub project: String,
    pub mode: AccessMode,
    /// The client endpoint is not IT-managed.
    #[arg(long)]
    pub unmanaged: bool,
    #[arg(long)]
    pub mfa: Option<String>,
    #[arg(long, requires = "subject")]
    pub issuer: Option<String>,
    #[arg(long)]
    pub subject: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum SessionCmd {
    Open(SessionArgs),
    Resume(SessionArgs),
    Close {
        session: String,
    },
    /// Re-aligns a session's shadow groups.
    Align {
        session: String,
    },
    /// Presents a session's credential to a VM.
    Auth {
        session: String,
        #[arg(long)]
        vm: Option<String>,
    },
    /// Reclaims lapsed retention bindings.
    Expire,
}

#[derive(Debug, Subcommand)]
pub enum EgressCmd {
    Clipboard {
        session: String,
        direction: ClipboardDirection,
    },
    File {
        session: String,
        object: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum ExportCmd {
    Submit {
        session: String,
        payload: String,
    },
    Adjudicate {
        broker: String,
        request: String,
        verdict: ExportVerdict,
        rationale: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum ImageCmd {
    Submit {
        builder: String,
        project: String,
        payload: String,
        /// Where the build came from, as `zone:<id>`, `vm:<id>` or `session:<id>`.
        #[arg(long, default_value = "zone:Campus")]
        from: String,
    },
    Vet {
        vetter: String,
        image: String,
        report: String,
    },
    Approve {
        approver: String,
        image: String,
    },
    Deploy {
        operator: String,
        image: String,
        project: String,
        /// Digest to present, in hex; defaults to the recorded one.
        #[arg(long)]
        digest: Option<String>,
    },
    Update {
        operator: String,
        instance: String,
        image: String,
    },
    Revoke {
        actor: String,
        image: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum AuditCmd {
    /// Every ledger event of one session.
    Trace {
        session: String,
    },
    Verify,
    Report {
        project: String,
        from: u64,
        to: u64,
    },
    /// Real principal behind an arbitrary user.
    Resolve {
        name: String,
        #[arg(long)]
        time: Option<u64>,
    },
    /// Prints the ledger export.
    Ledger,
}

fn session_op(a: SessionArgs, resume: bool) -> Op {
    let SessionArgs {
        netid,
        project,
        mode,
        unmanaged,
        mfa,
        issuer,
        subject,
    } = a;
    let managed = !unmanaged;
    if resume {
        Op::ResumeSession {
            netid,
            project,
            mode,
            managed,
            mfa,
            issuer,
            subject,
        }
    } else {
        Op::OpenSession {
            netid,
            project,
            mode,
            managed,
            mfa,
            issuer,
            subject,
        }
    }
}

/// The operation a verb stands for. `None` for verbs that are not broker
/// operations (`init`, `run`, `serve`, `audit ledger`).
pub fn to_op(command: Command) -> Option<Op> {
    let op = match command {
        Command::Init { .. }
        | Command::Run { .. }
        | Command::Serve
        | Command::Audit(AuditCmd::Ledger) => return None,
        Command::User(c) => match c {
            UserCmd::Register {
                netid,
                affiliate,
                sponsor,
            } => Op::RegisterUser {
                netid,
                affiliation: if affiliate {
                    Affiliation::Affiliate
                } else {
                    Affiliation::Member
                },
                sponsor,
            },
            UserCmd::Role { actor, netid, role } => Op::AssignRole { actor, netid, role },
            UserCmd::Mfa { netid, factor } => Op::EnrollMfa { netid, factor },
            UserCmd::Deactivate { actor, netid } => Op::DeactivateUser { actor, netid },
            UserCmd::TrustIssuer { actor, issuer } => Op::TrustIssuer { actor, issuer },
            UserCmd::MapSubject {
                actor,
                issuer,
                subject,
                netid,
            } => Op::MapSubject {
                actor,
                issuer,
                subject,
                netid,
            },
            UserCmd::Authenticate {
                netid,
                issuer,
                subject,
                mfa,
            } => Op::Authenticate {
                netid,
                issuer,
                subject,
                mfa,
            },
        },
        Command::Group(c) => match c {
            GroupCmd::Create {
                actor,
                name,
                project,
            } => Op::CreateGroup {
                actor,
                name,
                project,
            },
            GroupCmd::Add {
                actor,
                group,
                netid,
            } => Op::Membership {
                actor,
                group,
                netid,
                action: MembershipAction::Add,
            },
            GroupCmd::Remove {
                actor,
                group,
                netid,
            } => Op::Membership {
                actor,
                group,
                netid,
                action: MembershipAction::Remove,
            },
        },
        Command::Project(c) => match c {
            ProjectCmd::Register {
                actor,
                id,
                classification,
                stewards,
                role_rules,
                zone,
                retention_days,
            } => Op::RegisterProject {
                actor,
                id,
                classification,
                stewards,
                role_rules,
                zone,
                retention_days,
            },
            ProjectCmd::Role {
                actor,
                project,
                role,
                netid,
            } => Op::AssignProjectRole {
                actor,
                project,
                role,
                netid,
            },
            ProjectCmd::Check {
                netid,
                project,
                mode,
                mfa,
            } => Op::CheckAccess {
                netid,
                project,
                mode,
                mfa,
            },
        },
        Command::Grant {
            actor,
            project,
            netid,
            mode,
        } => Op::Grant {
            actor,
            project,
            netid,
            mode,
        },
        Command::Revoke {
            actor,
            project,
            netid,
            mode,
        } => Op::Revoke {
            actor,
            project,
            netid,
            mode,
        },
        Command::Vm(c) => match c {
            VmCmd::Provision {
                project,
                zone,
                cpu,
                ram_gb,
                dedicated,
            } => Op::ProvisionVm {
                project,
                zone,
                cpu,
                ram_gb,
                dedicated,
            },
            VmCmd::Resize { vm, cpu, ram_gb } => Op::ResizeVm { vm, cpu, ram_gb },
            VmCmd::Destroy { vm } => Op::DestroyVm { vm },
            VmCmd::Write { vm, token } => Op::WriteDisk { vm, token },
            VmCmd::Read { vm } => Op::ReadDisk { vm },
        },
        Command::Share(c) => match c {
            ShareCmd::Create {
                project,
                protocol,
                capacity_tb,
                dedicated_device,
                encrypted,
            } => Op::CreateShare {
                project,
                protocol,
                capacity_tb,
                dedicated_device,
                encrypted_at_rest: encrypted,
            },
            ShareCmd::Acl {
                actor,
                share,
                groups,
            } => Op::ShareAcl {
                actor,
                share,
                groups,
            },
            ShareCmd::Check {
                share,
                identity,
                session,
            } => Op::CheckShareAcl {
                identity,
                session,
                share,
            },
        },
        Command::Net(c) => match c {
            NetCmd::Reach { src, dst, service } => Op::Reach { src, dst, service },
            NetCmd::Connect { src, dst, service } => Op::Connect { src, dst, service },
            NetCmd::Exception {
                actor,
                id,
                service,
                src,
                dst,
                direction,
                documented_by,
            } => Op::RegisterException {
                actor,
                id,
                service,
                src,
                dst,
                direction,
                documented_by,
            },
            NetCmd::Whitelist {
                actor,
                project,
                origins,
            } => Op::ProxyWhitelist {
                actor,
                project,
                origins,
            },
            NetCmd::Fetch { project, url } => Op::ProxyFetch { project, url },
        },
        Command::Session(c) => match c {
            SessionCmd::Open(a) => session_op(a, false),
            SessionCmd::Resume(a) => session_op(a, true),
            SessionCmd::Close { session } => Op::CloseSession { session },
            SessionCmd::Align { session } => Op::AlignGroups { session },
            SessionCmd::Auth { session, vm } => Op::VmAuth {
                session,
                vm,
                target_session: None,
            },
            SessionCmd::Expire => Op::Expire {},
        },
        Command::Egress(c) => match c {
            EgressCmd::Clipboard { session, direction } => Op::Clipboard { session, direction },
            EgressCmd::File { session, object } => Op::FileEgress { session, object },
        },
        Command::Export(c) => match c {
            ExportCmd::Submit { session, payload } => Op::ExportSubmit { session, payload },
            ExportCmd::Adjudicate {
                broker,
                request,
                verdict,
                rationale,
            } => Op::ExportAdjudicate {
                broker,
                request,
                verdict,
                rationale,
            },
        },
        Command::Image(c) => match c {
            ImageCmd::Submit {
                builder,
                project,
                payload,
                from,
            } => Op::ImageSubmit {
                builder,
                project,
                payload,
                from,
            },
            ImageCmd::Vet {
                vetter,
                image,
                report,
            } => Op::ImageVet {
                vetter,
                image,
                report,
            },
            ImageCmd::Approve { approver, image } => Op::ImageApprove { approver, image },
            ImageCmd::Deploy {
                operator,
                image,
                project,
                digest,
            } => Op::ImageDeploy {
                operator,
                image,
                project,
                digest,
            },
            ImageCmd::Update {
                operator,
                instance,
                image,
            } => Op::ImageUpdate {
                operator,
                instance,
                image,
            },
            ImageCmd::Revoke { actor, image } => Op::ImageRevoke { actor, image },
        },
        Command::Audit(c) => match c {
            AuditCmd::Trace { session } => Op::Trace { session },
            AuditCmd::Verify => Op::VerifyChain {},
            AuditCmd::Report { project, from, to } => Op::Report { project, from, to },
            AuditCmd::Resolve { name, time } => Op::Resolve {
                name: Some(name),
                session: None,
                time,
            },
            AuditCmd::Ledger => unreachable!("handled above"),
        },
        Command::Advance { to } => Op::Advance { to },
    };
    Some(op)
}
